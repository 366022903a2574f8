//! Arena-backed doubly-linked lists. Several lists share one arena so an
//! element can hop between lists without reallocating; every operation
//! touches a constant number of nodes, which the arena counts.

const NIL: u32 = u32::MAX;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(u32);

#[derive(Clone, Debug)]
struct Node<T> {
    value: T,
    prev: u32,
    next: u32,
    live: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ListHead {
    head: u32,
    tail: u32,
    len: usize,
}

impl Default for ListHead {
    fn default() -> Self {
        Self { head: NIL, tail: NIL, len: 0 }
    }
}

impl ListHead {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Cost accounting for list operations.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct TouchStats {
    pub ops: u64,
    pub touches: u64,
    pub max_touches_per_op: u64,
}

#[derive(Clone, Debug)]
pub struct NodeArena<T> {
    nodes: Vec<Node<T>>,
    free: Vec<u32>,
    stats: TouchStats,
}

impl<T: Copy> Default for NodeArena<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Copy> NodeArena<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), free: Vec::new(), stats: TouchStats::default() }
    }

    pub fn stats(&self) -> TouchStats {
        self.stats
    }

    fn record(&mut self, touches: u64) {
        self.stats.ops += 1;
        self.stats.touches += touches;
        self.stats.max_touches_per_op = self.stats.max_touches_per_op.max(touches);
    }

    pub fn get(&self, node: NodeRef) -> T {
        self.nodes[node.0 as usize].value
    }

    /// Insert at the head (most recent end).
    pub fn push_front(&mut self, list: &mut ListHead, value: T) -> NodeRef {
        let node = Node { value, prev: NIL, next: list.head, live: true };
        let idx = match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = node;
                i
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        };
        let mut touches = 1;
        if list.head != NIL {
            self.nodes[list.head as usize].prev = idx;
            touches += 1;
        } else {
            list.tail = idx;
        }
        list.head = idx;
        list.len += 1;
        self.record(touches);
        NodeRef(idx)
    }

    pub fn remove(&mut self, list: &mut ListHead, node: NodeRef) -> T {
        let idx = node.0;
        let (prev, next, value) = {
            let n = &self.nodes[idx as usize];
            debug_assert!(n.live, "removing dead node");
            (n.prev, n.next, n.value)
        };
        let mut touches = 1;
        if prev != NIL {
            self.nodes[prev as usize].next = next;
            touches += 1;
        } else {
            list.head = next;
        }
        if next != NIL {
            self.nodes[next as usize].prev = prev;
            touches += 1;
        } else {
            list.tail = prev;
        }
        self.nodes[idx as usize].live = false;
        self.free.push(idx);
        list.len -= 1;
        self.record(touches);
        value
    }

    /// Remove and return the tail (least recent end).
    pub fn pop_back(&mut self, list: &mut ListHead) -> Option<T> {
        if list.tail == NIL {
            return None;
        }
        Some(self.remove(list, NodeRef(list.tail)))
    }

    /// Values from tail to head.
    pub fn iter_back<'a>(&'a self, list: &ListHead) -> impl Iterator<Item = T> + 'a {
        let mut cur = list.tail;
        std::iter::from_fn(move || {
            if cur == NIL {
                return None;
            }
            let n = &self.nodes[cur as usize];
            cur = n.prev;
            Some(n.value)
        })
    }

    /// Empties the list, returning values tail to head.
    pub fn drain(&mut self, list: &mut ListHead) -> Vec<T> {
        let mut out = Vec::with_capacity(list.len);
        while let Some(v) = self.pop_back(list) {
            out.push(v);
        }
        out
    }
}
