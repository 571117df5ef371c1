//! Scalar reverse-mode automatic differentiation with differentiable gradients.
//!
//! Operations are recorded on an append-only [`ExpressionTape`]; every node
//! caches its value at construction time. [`ExpressionTape::gradient`] does not
//! return plain numbers — it appends the adjoint computation to the *same*
//! tape and returns handles, so a gradient can be fed back into further
//! expressions and differentiated again (double backward). The optimizer hot
//! path uses [`ExpressionTape::grad_values`], a value-only adjoint sweep that
//! adds no nodes.
//!
//! The `dot` opcode is a fused n-ary primitive. When both operand lists are
//! contiguous index ranges (the layout the network module produces) the record
//! is constant-size, which keeps tape memory proportional to the number of
//! units rather than the number of weights.

use thiserror::Error;

/// Identifies one node on one tape.
///
/// A handle is valid for exactly the tape that created it; using it with any
/// other tape (including the same tape after [`ExpressionTape::clear`]) is a
/// contract violation and is rejected rather than silently accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeHandle {
    tape_id: u64,
    index: u32,
}

impl NodeHandle {
    /// Position of the node in its tape.
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

/// Opcodes accepted by [`ExpressionTape::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCode {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Abs,
    /// n-ary sum of all operands.
    Sum,
    /// Fused dot product: operands are `[a_0..a_n, b_0..b_n]` and the value is
    /// `Σ a_i·b_i`.
    Dot,
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("handle belongs to a different tape (expected tape {expected}, got {got})")]
    TapeMismatch { expected: u64, got: u64 },
    #[error("opcode {op:?} expects {expected} operand(s), got {got}")]
    ArityMismatch {
        op: OpCode,
        expected: usize,
        got: usize,
    },
    #[error("dot expects an even operand count (a-side then b-side), got {0}")]
    OddDotOperands(usize),
    #[error("node {0} is not a leaf; only leaf values can be set")]
    NotALeaf(usize),
}

/// Internal operation record. Fixed-arity ops store operand indices inline;
/// n-ary ops reference a range of the shared argument arena.
#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Log(u32),
    Relu(u32),
    Sigmoid(u32),
    Square(u32),
    Sqrt(u32),
    Abs(u32),
    /// 1 if input > 0 else 0. Derivative of relu; its own derivative is 0.
    Step(u32),
    /// -1/0/+1. Derivative of abs; its own derivative is 0.
    Sign(u32),
    Sum { start: u32, len: u32 },
    DotRange { a: u32, b: u32, len: u32 },
    DotArgs { start: u32, pairs: u32 },
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

static NEXT_TAPE_ID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
}

/// Append-only scalar computation graph.
///
/// Nodes are topologically ordered by construction: every operand index is
/// strictly less than the node's own index. Values are evaluated eagerly and
/// cached; [`ExpressionTape::reevaluate`] replays the tape forward, which
/// reproduces every cached value bit-identically for unchanged leaf values.
pub struct ExpressionTape {
    id: u64,
    ops: Vec<Op>,
    vals: Vec<f64>,
    args: Vec<u32>,
}

impl Default for ExpressionTape {
    fn default() -> Self {
        Self::new()
    }
}

impl ExpressionTape {
    pub fn new() -> Self {
        ExpressionTape {
            id: fresh_tape_id(),
            ops: Vec::new(),
            vals: Vec::new(),
            args: Vec::new(),
        }
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Discards all nodes but keeps allocated capacity. The tape is re-keyed,
    /// so handles from before the clear are rejected instead of dangling.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.args.clear();
        self.id = fresh_tape_id();
    }

    fn check(&self, h: NodeHandle) -> Result<u32, TapeError> {
        if h.tape_id != self.id {
            return Err(TapeError::TapeMismatch {
                expected: self.id,
                got: h.tape_id,
            });
        }
        Ok(h.index)
    }

    fn assert_own(&self, h: NodeHandle) -> u32 {
        assert_eq!(
            h.tape_id, self.id,
            "node handle used with a tape that did not create it"
        );
        h.index
    }

    fn push(&mut self, op: Op, val: f64) -> NodeHandle {
        let index = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        NodeHandle {
            tape_id: self.id,
            index,
        }
    }

    /// Creates a leaf node holding `value`. Two calls with the same value
    /// produce distinct, independent nodes.
    pub fn variable(&mut self, value: f64) -> NodeHandle {
        self.push(Op::Leaf, value)
    }

    /// Alias of [`variable`](Self::variable) for values that are data rather
    /// than differentiation targets; leaves are leaves either way.
    pub fn constant(&mut self, value: f64) -> NodeHandle {
        self.push(Op::Leaf, value)
    }

    /// Cached value of a node.
    pub fn value(&self, h: NodeHandle) -> f64 {
        let i = self.assert_own(h);
        self.vals[i as usize]
    }

    /// Overwrites a leaf's value. Downstream nodes are stale until
    /// [`reevaluate`](Self::reevaluate) is called.
    pub fn set_value(&mut self, h: NodeHandle, value: f64) -> Result<(), TapeError> {
        let i = self.check(h)? as usize;
        match self.ops[i] {
            Op::Leaf => {
                self.vals[i] = value;
                Ok(())
            }
            _ => Err(TapeError::NotALeaf(i)),
        }
    }

    fn eval_op(op: Op, vals: &[f64], args: &[u32]) -> f64 {
        match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::Add(a, b) => vals[a as usize] + vals[b as usize],
            Op::Sub(a, b) => vals[a as usize] - vals[b as usize],
            Op::Mul(a, b) => vals[a as usize] * vals[b as usize],
            Op::Div(a, b) => vals[a as usize] / vals[b as usize],
            Op::Neg(a) => -vals[a as usize],
            Op::Exp(a) => vals[a as usize].exp(),
            Op::Log(a) => vals[a as usize].ln(),
            Op::Relu(a) => vals[a as usize].max(0.0),
            Op::Sigmoid(a) => stable_sigmoid(vals[a as usize]),
            Op::Square(a) => {
                let v = vals[a as usize];
                v * v
            }
            Op::Sqrt(a) => vals[a as usize].sqrt(),
            Op::Abs(a) => vals[a as usize].abs(),
            Op::Step(a) => {
                if vals[a as usize] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Op::Sign(a) => {
                let v = vals[a as usize];
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Op::Sum { start, len } => {
                let mut acc = 0.0;
                for &a in &args[start as usize..(start + len) as usize] {
                    acc += vals[a as usize];
                }
                acc
            }
            Op::DotRange { a, b, len } => {
                let mut acc = 0.0;
                for i in 0..len as usize {
                    acc += vals[a as usize + i] * vals[b as usize + i];
                }
                acc
            }
            Op::DotArgs { start, pairs } => {
                let n = pairs as usize;
                let s = start as usize;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += vals[args[s + i] as usize] * vals[args[s + n + i] as usize];
                }
                acc
            }
        }
    }

    fn push_eval(&mut self, op: Op) -> NodeHandle {
        let val = Self::eval_op(op, &self.vals, &self.args);
        self.push(op, val)
    }

    /// Replays the whole tape forward from current leaf values.
    pub fn reevaluate(&mut self) {
        for i in 0..self.ops.len() {
            if !matches!(self.ops[i], Op::Leaf) {
                self.vals[i] = Self::eval_op(self.ops[i], &self.vals, &self.args);
            }
        }
    }

    // Builder methods. These assert tape ownership; `apply` is the checked
    // front door for dynamically chosen opcodes.

    pub fn add(&mut self, a: NodeHandle, b: NodeHandle) -> NodeHandle {
        let (a, b) = (self.assert_own(a), self.assert_own(b));
        self.push_eval(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeHandle, b: NodeHandle) -> NodeHandle {
        let (a, b) = (self.assert_own(a), self.assert_own(b));
        self.push_eval(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeHandle, b: NodeHandle) -> NodeHandle {
        let (a, b) = (self.assert_own(a), self.assert_own(b));
        self.push_eval(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeHandle, b: NodeHandle) -> NodeHandle {
        let (a, b) = (self.assert_own(a), self.assert_own(b));
        self.push_eval(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: NodeHandle) -> NodeHandle {
        let a = self.assert_own(a);
        self.push_eval(Op::Abs(a))
    }

    fn step(&mut self, a: u32) -> NodeHandle {
        self.push_eval(Op::Step(a))
    }

    fn sign(&mut self, a: u32) -> NodeHandle {
        self.push_eval(Op::Sign(a))
    }

    pub fn sum(&mut self, operands: &[NodeHandle]) -> NodeHandle {
        let start = self.args.len() as u32;
        for &h in operands {
            let i = self.assert_own(h);
            self.args.push(i);
        }
        self.push_eval(Op::Sum {
            start,
            len: operands.len() as u32,
        })
    }

    /// Dot product of two equally long handle slices.
    pub fn dot(&mut self, a: &[NodeHandle], b: &[NodeHandle]) -> NodeHandle {
        assert_eq!(a.len(), b.len(), "dot operand lists must have equal length");
        if let (Some(ar), Some(br)) = (self.contiguous(a), self.contiguous(b)) {
            return self.push_eval(Op::DotRange {
                a: ar,
                b: br,
                len: a.len() as u32,
            });
        }
        let start = self.args.len() as u32;
        for &h in a {
            let i = self.assert_own(h);
            self.args.push(i);
        }
        for &h in b {
            let i = self.assert_own(h);
            self.args.push(i);
        }
        self.push_eval(Op::DotArgs {
            start,
            pairs: a.len() as u32,
        })
    }

    /// Dot product over two contiguous index ranges of equal length, starting
    /// at `a` and `b`. The network forward pass lays out weight rows and
    /// activation blocks contiguously exactly so it can use this form.
    pub fn dot_range(&mut self, a: NodeHandle, b: NodeHandle, len: usize) -> NodeHandle {
        let a = self.assert_own(a);
        let b = self.assert_own(b);
        let end = (a.max(b) as usize) + len;
        assert!(end <= self.ops.len(), "dot_range extends past end of tape");
        self.push_eval(Op::DotRange {
            a,
            b,
            len: len as u32,
        })
    }

    fn contiguous(&self, hs: &[NodeHandle]) -> Option<u32> {
        let first = hs.first()?;
        let base = self.assert_own(*first);
        for (i, h) in hs.iter().enumerate() {
            if self.assert_own(*h) != base + i as u32 {
                return None;
            }
        }
        Some(base)
    }

    /// Checked application of an opcode to an operand list.
    pub fn apply(&mut self, op: OpCode, operands: &[NodeHandle]) -> Result<NodeHandle, TapeError> {
        for &h in operands {
            self.check(h)?;
        }
        let need = |n: usize| -> Result<(), TapeError> {
            if operands.len() != n {
                Err(TapeError::ArityMismatch {
                    op,
                    expected: n,
                    got: operands.len(),
                })
            } else {
                Ok(())
            }
        };
        let node = match op {
            OpCode::Add => {
                need(2)?;
                self.add(operands[0], operands[1])
            }
            OpCode::Sub => {
                need(2)?;
                self.sub(operands[0], operands[1])
            }
            OpCode::Mul => {
                need(2)?;
                self.mul(operands[0], operands[1])
            }
            OpCode::Div => {
                need(2)?;
                self.div(operands[0], operands[1])
            }
            OpCode::Neg => {
                need(1)?;
                self.neg(operands[0])
            }
            OpCode::Exp => {
                need(1)?;
                self.exp(operands[0])
            }
            OpCode::Log => {
                need(1)?;
                self.log(operands[0])
            }
            OpCode::Relu => {
                need(1)?;
                self.relu(operands[0])
            }
            OpCode::Sigmoid => {
                need(1)?;
                self.sigmoid(operands[0])
            }
            OpCode::Square => {
                need(1)?;
                self.square(operands[0])
            }
            OpCode::Sqrt => {
                need(1)?;
                self.sqrt(operands[0])
            }
            OpCode::Abs => {
                need(1)?;
                self.abs(operands[0])
            }
            OpCode::Sum => self.sum(operands),
            OpCode::Dot => {
                if operands.len() % 2 != 0 {
                    return Err(TapeError::OddDotOperands(operands.len()));
                }
                let (a, b) = operands.split_at(operands.len() / 2);
                self.dot(a, b)
            }
        };
        Ok(node)
    }

    /// Appends the reverse-mode adjoint of `output` with respect to each `wrt`
    /// node and returns the resulting handles, one per `wrt` entry.
    ///
    /// The returned nodes live on this tape, so they can participate in
    /// further expressions and be differentiated again. A `wrt` node the
    /// output does not depend on yields a zero-valued node.
    pub fn gradient(
        &mut self,
        output: NodeHandle,
        wrt: &[NodeHandle],
    ) -> Result<Vec<NodeHandle>, TapeError> {
        let out_idx = self.check(output)? as usize;
        for &h in wrt {
            self.check(h)?;
        }

        // adjoint[i] is built up as nodes; contributions only flow downward,
        // so a strictly decreasing sweep sees each adjoint finalized before
        // it propagates.
        let mut adjoint: Vec<Option<NodeHandle>> = vec![None; out_idx + 1];
        adjoint[out_idx] = Some(self.constant(1.0));

        for i in (0..=out_idx).rev() {
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.ops[i];
            match op {
                Op::Leaf | Op::Step(_) | Op::Sign(_) => {}
                Op::Add(a, b) => {
                    Self::accumulate(self, &mut adjoint, a, g);
                    Self::accumulate(self, &mut adjoint, b, g);
                }
                Op::Sub(a, b) => {
                    Self::accumulate(self, &mut adjoint, a, g);
                    let c = self.neg(g);
                    Self::accumulate(self, &mut adjoint, b, c);
                }
                Op::Mul(a, b) => {
                    let hb = self.handle(b);
                    let ca = self.mul(g, hb);
                    Self::accumulate(self, &mut adjoint, a, ca);
                    let ha = self.handle(a);
                    let cb = self.mul(g, ha);
                    Self::accumulate(self, &mut adjoint, b, cb);
                }
                Op::Div(a, b) => {
                    // d(a/b)/da = 1/b, d(a/b)/db = -out/b
                    let hb = self.handle(b);
                    let ca = self.div(g, hb);
                    Self::accumulate(self, &mut adjoint, a, ca);
                    let hout = self.handle(i as u32);
                    let t = self.mul(g, hout);
                    let t = self.div(t, hb);
                    let cb = self.neg(t);
                    Self::accumulate(self, &mut adjoint, b, cb);
                }
                Op::Neg(a) => {
                    let c = self.neg(g);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Exp(a) => {
                    let hout = self.handle(i as u32);
                    let c = self.mul(g, hout);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Log(a) => {
                    let ha = self.handle(a);
                    let c = self.div(g, ha);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let s = self.step(a);
                    let c = self.mul(g, s);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Sigmoid(a) => {
                    // σ' = σ - σ²
                    let hout = self.handle(i as u32);
                    let sq = self.square(hout);
                    let d = self.sub(hout, sq);
                    let c = self.mul(g, d);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Square(a) => {
                    let ha = self.handle(a);
                    let two_a = self.add(ha, ha);
                    let c = self.mul(g, two_a);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Sqrt(a) => {
                    let hout = self.handle(i as u32);
                    let denom = self.add(hout, hout);
                    let c = self.div(g, denom);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Abs(a) => {
                    // Subgradient 0 at 0.
                    let s = self.sign(a);
                    let c = self.mul(g, s);
                    Self::accumulate(self, &mut adjoint, a, c);
                }
                Op::Sum { start, len } => {
                    for j in 0..len as usize {
                        let a = self.args[start as usize + j];
                        Self::accumulate(self, &mut adjoint, a, g);
                    }
                }
                Op::DotRange { a, b, len } => {
                    for j in 0..len as u32 {
                        let hb = self.handle(b + j);
                        let c = self.mul(g, hb);
                        Self::accumulate(self, &mut adjoint, a + j, c);
                        let ha = self.handle(a + j);
                        let c = self.mul(g, ha);
                        Self::accumulate(self, &mut adjoint, b + j, c);
                    }
                }
                Op::DotArgs { start, pairs } => {
                    let n = pairs as usize;
                    for j in 0..n {
                        let ai = self.args[start as usize + j];
                        let bi = self.args[start as usize + n + j];
                        let hb = self.handle(bi);
                        let c = self.mul(g, hb);
                        Self::accumulate(self, &mut adjoint, ai, c);
                        let ha = self.handle(ai);
                        let c = self.mul(g, ha);
                        Self::accumulate(self, &mut adjoint, bi, c);
                    }
                }
            }
        }

        let grads = wrt
            .iter()
            .map(|h| {
                let i = h.index as usize;
                match adjoint.get(i).copied().flatten() {
                    Some(g) => g,
                    None => self.constant(0.0),
                }
            })
            .collect();
        Ok(grads)
    }

    fn handle(&self, index: u32) -> NodeHandle {
        NodeHandle {
            tape_id: self.id,
            index,
        }
    }

    /// Handle of the existing node at `index`.
    pub fn handle_at(&self, index: usize) -> NodeHandle {
        assert!(index < self.ops.len(), "node index {index} out of range");
        self.handle(index as u32)
    }

    fn accumulate(
        tape: &mut ExpressionTape,
        adjoint: &mut [Option<NodeHandle>],
        target: u32,
        contribution: NodeHandle,
    ) {
        let slot = &mut adjoint[target as usize];
        *slot = Some(match *slot {
            None => contribution,
            Some(prev) => tape.add(prev, contribution),
        });
    }

    /// Value-only adjoint sweep: returns `∂output/∂wrt_i` as plain numbers
    /// without growing the tape. Used for the final differentiation of a loss,
    /// which never needs to be differentiated again.
    pub fn grad_values(
        &self,
        output: NodeHandle,
        wrt: &[NodeHandle],
    ) -> Result<Vec<f64>, TapeError> {
        let out_idx = self.check(output)? as usize;
        for &h in wrt {
            self.check(h)?;
        }
        let mut adj = vec![0.0f64; out_idx + 1];
        adj[out_idx] = 1.0;

        for i in (0..=out_idx).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf | Op::Step(_) | Op::Sign(_) => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * self.vals[b as usize];
                    adj[b as usize] += g * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = self.vals[b as usize];
                    adj[a as usize] += g / vb;
                    adj[b as usize] -= g * self.vals[i] / vb;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::Exp(a) => adj[a as usize] += g * self.vals[i],
                Op::Log(a) => adj[a as usize] += g / self.vals[a as usize],
                Op::Relu(a) => {
                    if self.vals[a as usize] > 0.0 {
                        adj[a as usize] += g;
                    }
                }
                Op::Sigmoid(a) => {
                    let s = self.vals[i];
                    adj[a as usize] += g * (s - s * s);
                }
                Op::Square(a) => {
                    let va = self.vals[a as usize];
                    adj[a as usize] += g * (va + va);
                }
                Op::Sqrt(a) => {
                    let s = self.vals[i];
                    adj[a as usize] += g / (s + s);
                }
                Op::Abs(a) => {
                    let va = self.vals[a as usize];
                    if va > 0.0 {
                        adj[a as usize] += g;
                    } else if va < 0.0 {
                        adj[a as usize] -= g;
                    }
                }
                Op::Sum { start, len } => {
                    for &a in &self.args[start as usize..(start + len) as usize] {
                        adj[a as usize] += g;
                    }
                }
                Op::DotRange { a, b, len } => {
                    for j in 0..len as usize {
                        adj[a as usize + j] += g * self.vals[b as usize + j];
                        adj[b as usize + j] += g * self.vals[a as usize + j];
                    }
                }
                Op::DotArgs { start, pairs } => {
                    let n = pairs as usize;
                    let s = start as usize;
                    for j in 0..n {
                        let ai = self.args[s + j] as usize;
                        let bi = self.args[s + n + j] as usize;
                        adj[ai] += g * self.vals[bi];
                        adj[bi] += g * self.vals[ai];
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|h| adj.get(h.index as usize).copied().unwrap_or(0.0))
            .collect())
    }
}

/// Central-difference gradient estimate of `f` at `point`, component-wise
/// `(f(p + h·e_i) - f(p - h·e_i)) / 2h`. Test oracle for every analytic
/// gradient in the crate.
pub fn finite_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut grad = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = f(&p);
        p[i] = orig - step;
        let fm = f(&p);
        p[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variables_hold_their_values() {
        let mut t = ExpressionTape::new();
        let zero = t.variable(0.0);
        let v = t.variable(2.5);
        assert_eq!(t.value(zero), 0.0);
        assert_eq!(t.value(v), 2.5);
    }

    #[test]
    fn same_value_distinct_handles() {
        let mut t = ExpressionTape::new();
        let a = t.variable(1.5);
        let b = t.variable(1.5);
        assert_ne!(a, b);
        // Differentiating through one leaves the other untouched.
        let y = t.mul(a, a);
        let g = t.gradient(y, &[a, b]).unwrap();
        assert_eq!(t.value(g[0]), 3.0);
        assert_eq!(t.value(g[1]), 0.0);
    }

    #[test]
    fn apply_evaluates_primitives() {
        let mut t = ExpressionTape::new();
        let x = t.variable(3.0);
        let y = t.variable(4.0);
        let m = t.apply(OpCode::Mul, &[x, y]).unwrap();
        assert_eq!(t.value(m), 12.0);

        let z = t.variable(0.0);
        let s = t.apply(OpCode::Sigmoid, &[z]).unwrap();
        assert_eq!(t.value(s), 0.5);

        let n = t.variable(-2.0);
        let r = t.apply(OpCode::Relu, &[n]).unwrap();
        assert_eq!(t.value(r), 0.0);
    }

    #[test]
    fn apply_rejects_bad_arity_and_foreign_handles() {
        let mut t = ExpressionTape::new();
        let x = t.variable(1.0);
        assert!(matches!(
            t.apply(OpCode::Mul, &[x]),
            Err(TapeError::ArityMismatch { .. })
        ));

        let mut other = ExpressionTape::new();
        let y = other.variable(1.0);
        assert!(matches!(
            t.apply(OpCode::Neg, &[y]),
            Err(TapeError::TapeMismatch { .. })
        ));
        assert!(matches!(
            t.gradient(x, &[y]),
            Err(TapeError::TapeMismatch { .. })
        ));
    }

    #[test]
    fn square_gradient_and_second_derivative() {
        let mut t = ExpressionTape::new();
        let x = t.variable(3.0);
        let y = t.square(x);
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(t.value(g[0]), 6.0);
        let gg = t.gradient(g[0], &[x]).unwrap();
        assert_eq!(t.value(gg[0]), 2.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = ExpressionTape::new();
        let x = t.variable(0.0);
        let y = t.sigmoid(x);
        let g = t.gradient(y, &[x]).unwrap();
        assert_relative_eq!(t.value(g[0]), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn double_backward_quartic() {
        // f(x) = x⁴ at x = 2: f'' = 12x² = 48.
        let mut t = ExpressionTape::new();
        let x = t.variable(2.0);
        let x2 = t.square(x);
        let y = t.square(x2);
        let g = t.gradient(y, &[x]).unwrap();
        assert_relative_eq!(t.value(g[0]), 32.0, epsilon = 1e-9);
        let gg = t.gradient(g[0], &[x]).unwrap();
        assert_relative_eq!(t.value(gg[0]), 48.0, epsilon = 1e-9);
    }

    #[test]
    fn nested_gradient_matches_finite_difference() {
        // h(w) = (g·w)² with g = ∂((w·x - y)²)/∂w at w = 0.5, x = 1, y = 1.
        let build = |w: f64| -> f64 {
            let mut t = ExpressionTape::new();
            let wv = t.variable(w);
            let xv = t.constant(1.0);
            let yv = t.constant(1.0);
            let pred = t.mul(wv, xv);
            let resid = t.sub(pred, yv);
            let loss = t.square(resid);
            let g = t.gradient(loss, &[wv]).unwrap()[0];
            let gw = t.mul(g, wv);
            let h = t.square(gw);
            t.value(h)
        };
        let analytic = {
            let mut t = ExpressionTape::new();
            let wv = t.variable(0.5);
            let xv = t.constant(1.0);
            let yv = t.constant(1.0);
            let pred = t.mul(wv, xv);
            let resid = t.sub(pred, yv);
            let loss = t.square(resid);
            let g = t.gradient(loss, &[wv]).unwrap()[0];
            let gw = t.mul(g, wv);
            let h = t.square(gw);
            let outer = t.gradient(h, &[wv]).unwrap()[0];
            t.value(outer)
        };
        // h(w) = 4w²(w-1)² has a critical point at w = 0.5, so compare with
        // an absolute floor alongside the relative bound.
        let fd = finite_difference(|p| build(p[0]), &[0.5], 1e-5)[0];
        assert!(
            (analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()).max(1.0),
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn finite_difference_basics() {
        let g = finite_difference(|p| p[0] * p[0], &[3.0], 1e-5);
        assert_relative_eq!(g[0], 6.0, epsilon = 1e-8);
        let g = finite_difference(|_| 7.0, &[1.0, 2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    /// Every primitive's analytic derivative against central differences on
    /// random points, kinks excluded for relu/abs.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let unary: &[(OpCode, fn(f64) -> bool)] = &[
            (OpCode::Neg, |_| true),
            (OpCode::Exp, |x| x.abs() < 20.0),
            (OpCode::Log, |x| x > 1e-2),
            (OpCode::Relu, |x| x.abs() > 1e-3),
            (OpCode::Sigmoid, |_| true),
            (OpCode::Square, |_| true),
            (OpCode::Sqrt, |x| x > 1e-2),
            (OpCode::Abs, |x| x.abs() > 1e-3),
        ];
        for &(op, admissible) in unary {
            let mut checked = 0;
            while checked < 100 {
                let x: f64 = rng.gen_range(-4.0..4.0);
                let x = if matches!(op, OpCode::Log | OpCode::Sqrt) {
                    x.abs() + 1e-2
                } else {
                    x
                };
                if !admissible(x) {
                    continue;
                }
                let mut t = ExpressionTape::new();
                let xv = t.variable(x);
                let y = t.apply(op, &[xv]).unwrap();
                let g = t.gradient(y, &[xv]).unwrap()[0];
                let analytic = t.value(g);
                let fd = finite_difference(
                    |p| {
                        let mut t = ExpressionTape::new();
                        let xv = t.variable(p[0]);
                        let y = t.apply(op, &[xv]).unwrap();
                        t.value(y)
                    },
                    &[x],
                    1e-6,
                )[0];
                assert!(
                    (analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()).max(1.0),
                    "{op:?} at {x}: analytic {analytic} vs fd {fd}"
                );
                checked += 1;
            }
        }
        for op in [OpCode::Add, OpCode::Sub, OpCode::Mul, OpCode::Div] {
            for _ in 0..100 {
                let a: f64 = rng.gen_range(-4.0..4.0);
                let mut b: f64 = rng.gen_range(-4.0..4.0);
                if matches!(op, OpCode::Div) && b.abs() < 1e-1 {
                    b += 1.0_f64.copysign(b + 1e-9);
                }
                let mut t = ExpressionTape::new();
                let av = t.variable(a);
                let bv = t.variable(b);
                let y = t.apply(op, &[av, bv]).unwrap();
                let gs = t.gradient(y, &[av, bv]).unwrap();
                let analytic = [t.value(gs[0]), t.value(gs[1])];
                let fd = finite_difference(
                    |p| {
                        let mut t = ExpressionTape::new();
                        let av = t.variable(p[0]);
                        let bv = t.variable(p[1]);
                        let y = t.apply(op, &[av, bv]).unwrap();
                        t.value(y)
                    },
                    &[a, b],
                    1e-6,
                );
                for i in 0..2 {
                    assert!(
                        (analytic[i] - fd[i]).abs()
                            <= 1e-6 * analytic[i].abs().max(fd[i].abs()).max(1.0),
                        "{op:?} operand {i} at ({a},{b}): {} vs {}",
                        analytic[i],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn fused_dot_matches_sum_of_products_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let avals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bvals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let mut t = ExpressionTape::new();
            let a: Vec<_> = avals.iter().map(|&v| t.variable(v)).collect();
            let b: Vec<_> = bvals.iter().map(|&v| t.variable(v)).collect();
            let d = t.dot(&a, &b);
            let expect: f64 = avals.iter().zip(&bvals).map(|(x, y)| x * y).sum();
            assert_relative_eq!(t.value(d), expect, epsilon = 1e-12);

            let wrt: Vec<_> = a.iter().chain(b.iter()).copied().collect();
            let gs = t.gradient(d, &wrt).unwrap();
            for i in 0..n {
                assert_relative_eq!(t.value(gs[i]), bvals[i], epsilon = 1e-12);
                assert_relative_eq!(t.value(gs[n + i]), avals[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn non_contiguous_dot_falls_back() {
        let mut t = ExpressionTape::new();
        let a0 = t.variable(1.0);
        let _gap = t.variable(9.0);
        let a1 = t.variable(2.0);
        let b0 = t.variable(3.0);
        let b1 = t.variable(4.0);
        let d = t.dot(&[a0, a1], &[b0, b1]);
        assert_eq!(t.value(d), 11.0);
        let g = t.grad_values(d, &[a0, a1, b0, b1]).unwrap();
        assert_eq!(g, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn grad_values_agrees_with_gradient_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let xs: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..2.0)).collect();
            let mut t = ExpressionTape::new();
            let vs: Vec<_> = xs.iter().map(|&v| t.variable(v)).collect();
            // f = sigmoid(x0·x1 + x2/x3) · exp(-x0) + log(x3)
            let m = t.mul(vs[0], vs[1]);
            let q = t.div(vs[2], vs[3]);
            let s = t.add(m, q);
            let sg = t.sigmoid(s);
            let nx = t.neg(vs[0]);
            let e = t.exp(nx);
            let p = t.mul(sg, e);
            let l = t.log(vs[3]);
            let f = t.add(p, l);

            let by_nodes = t.gradient(f, &vs).unwrap();
            let by_values = t.grad_values(f, &vs).unwrap();
            for (n, v) in by_nodes.iter().zip(&by_values) {
                assert_relative_eq!(t.value(*n), *v, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn tape_determinism_bit_identical() {
        let build = || {
            let mut t = ExpressionTape::new();
            let x = t.variable(1.234567);
            let y = t.variable(-0.891);
            let m = t.mul(x, y);
            let s = t.sigmoid(m);
            let e = t.exp(s);
            let f = t.div(e, x);
            let g = t.gradient(f, &[x, y]).unwrap();
            (
                t.value(f).to_bits(),
                t.value(g[0]).to_bits(),
                t.value(g[1]).to_bits(),
            )
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn reevaluate_reproduces_values_bit_identically() {
        let mut t = ExpressionTape::new();
        let x = t.variable(0.37);
        let y = t.variable(2.2);
        let m = t.mul(x, y);
        let s = t.sigmoid(m);
        let q = t.sqrt(y);
        let f = t.add(s, q);
        let _g = t.gradient(f, &[x, y]).unwrap();
        let before: Vec<u64> = (0..t.len())
            .map(|i| t.value(t.handle(i as u32)).to_bits())
            .collect();
        t.reevaluate();
        let after: Vec<u64> = (0..t.len())
            .map(|i| t.value(t.handle(i as u32)).to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn set_value_then_reevaluate_moves_the_whole_graph() {
        let mut t = ExpressionTape::new();
        let x = t.variable(3.0);
        let y = t.square(x);
        let g = t.gradient(y, &[x]).unwrap()[0];
        assert_eq!(t.value(g), 6.0);
        t.set_value(x, 5.0).unwrap();
        t.reevaluate();
        assert_eq!(t.value(y), 25.0);
        assert_eq!(t.value(g), 10.0);
        assert!(matches!(t.set_value(y, 0.0), Err(TapeError::NotALeaf(_))));
    }

    #[test]
    fn cleared_tape_rejects_stale_handles() {
        let mut t = ExpressionTape::new();
        let x = t.variable(1.0);
        t.clear();
        let y = t.variable(2.0);
        assert!(matches!(
            t.gradient(y, &[x]),
            Err(TapeError::TapeMismatch { .. })
        ));
    }

    proptest! {
        /// gradient(a·f + b·g) = a·∇f + b·∇g.
        #[test]
        fn gradient_linearity(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            x in 0.1f64..2.0,
            y in 0.1f64..2.0,
        ) {
            let mut t = ExpressionTape::new();
            let xv = t.variable(x);
            let yv = t.variable(y);
            // f = x²y, g = sigmoid(x + y)
            let x2 = t.square(xv);
            let f = t.mul(x2, yv);
            let s = t.add(xv, yv);
            let g = t.sigmoid(s);

            let ca = t.constant(a);
            let cb = t.constant(b);
            let af = t.mul(ca, f);
            let bg = t.mul(cb, g);
            let combo = t.add(af, bg);

            let grad_combo = t.grad_values(combo, &[xv, yv]).unwrap();
            let grad_f = t.grad_values(f, &[xv, yv]).unwrap();
            let grad_g = t.grad_values(g, &[xv, yv]).unwrap();
            for i in 0..2 {
                let lin = a * grad_f[i] + b * grad_g[i];
                prop_assert!((grad_combo[i] - lin).abs() <= 1e-10_f64.max(1e-10 * lin.abs()));
            }
        }

        /// Sum node equals the fold of adds.
        #[test]
        fn sum_matches_sequential_adds(vals in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let mut t = ExpressionTape::new();
            let hs: Vec<_> = vals.iter().map(|&v| t.variable(v)).collect();
            let s = t.sum(&hs);
            let mut acc = hs[0];
            for &h in &hs[1..] {
                acc = t.add(acc, h);
            }
            prop_assert!((t.value(s) - t.value(acc)).abs() < 1e-9);
        }
    }
}
