//! Flattened evaluation tapes.
//!
//! A batch of expressions is compiled into one instruction list with shared
//! subexpressions deduplicated, so the TPBVP Newton loop and collocation
//! precomputation evaluate dynamics and their Jacobians in a single pass
//! without tree walking.

use super::{EvalError, Expression, Node};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy)]
enum Op {
    Var(u32),
    Const(f64),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Pow(u32, i32),
    Neg(u32),
    Sqrt(u32),
    Exp(u32),
    Sin(u32),
    Cos(u32),
    Tanh(u32),
}

/// Several expressions compiled into one straight-line program.
#[derive(Debug, Clone)]
pub struct CompiledTape {
    arity: usize,
    ops: Vec<Op>,
    outputs: Vec<u32>,
}

#[derive(Hash, PartialEq, Eq)]
enum Key {
    Var(u32),
    Const(u64),
    Bin(u8, u32, u32),
    Pow(u32, i32),
    Un(u8, u32),
}

struct Builder {
    ops: Vec<Op>,
    memo: HashMap<Key, u32>,
    by_ptr: HashMap<*const Node, u32>,
}

impl Builder {
    fn intern(&mut self, key: Key, op: Op) -> u32 {
        if let Some(&slot) = self.memo.get(&key) {
            return slot;
        }
        let slot = self.ops.len() as u32;
        self.ops.push(op);
        self.memo.insert(key, slot);
        slot
    }

    fn compile(&mut self, node: &Arc<Node>) -> u32 {
        let ptr = Arc::as_ptr(node);
        if let Some(&slot) = self.by_ptr.get(&ptr) {
            return slot;
        }
        let slot = match &**node {
            Node::Var(i) => self.intern(Key::Var(*i as u32), Op::Var(*i as u32)),
            Node::Const(c) => self.intern(Key::Const(c.to_bits()), Op::Const(*c)),
            Node::Add(a, b) => {
                let (sa, sb) = (self.compile(a), self.compile(b));
                self.intern(Key::Bin(0, sa, sb), Op::Add(sa, sb))
            }
            Node::Sub(a, b) => {
                let (sa, sb) = (self.compile(a), self.compile(b));
                self.intern(Key::Bin(1, sa, sb), Op::Sub(sa, sb))
            }
            Node::Mul(a, b) => {
                let (sa, sb) = (self.compile(a), self.compile(b));
                self.intern(Key::Bin(2, sa, sb), Op::Mul(sa, sb))
            }
            Node::Div(a, b) => {
                let (sa, sb) = (self.compile(a), self.compile(b));
                self.intern(Key::Bin(3, sa, sb), Op::Div(sa, sb))
            }
            Node::Pow(a, k) => {
                let sa = self.compile(a);
                self.intern(Key::Pow(sa, *k), Op::Pow(sa, *k))
            }
            Node::Neg(a) => {
                let sa = self.compile(a);
                self.intern(Key::Un(0, sa), Op::Neg(sa))
            }
            Node::Sqrt(a) => {
                let sa = self.compile(a);
                self.intern(Key::Un(1, sa), Op::Sqrt(sa))
            }
            Node::Exp(a) => {
                let sa = self.compile(a);
                self.intern(Key::Un(2, sa), Op::Exp(sa))
            }
            Node::Sin(a) => {
                let sa = self.compile(a);
                self.intern(Key::Un(3, sa), Op::Sin(sa))
            }
            Node::Cos(a) => {
                let sa = self.compile(a);
                self.intern(Key::Un(4, sa), Op::Cos(sa))
            }
            Node::Tanh(a) => {
                let sa = self.compile(a);
                self.intern(Key::Un(5, sa), Op::Tanh(sa))
            }
        };
        self.by_ptr.insert(ptr, slot);
        slot
    }
}

impl CompiledTape {
    pub fn compile(exprs: &[Expression]) -> CompiledTape {
        assert!(!exprs.is_empty());
        let arity = exprs[0].arity();
        for e in exprs {
            assert_eq!(e.arity(), arity, "all expressions must share arity");
        }
        let mut b = Builder { ops: Vec::new(), memo: HashMap::new(), by_ptr: HashMap::new() };
        let outputs = exprs.iter().map(|e| b.compile(e.root())).collect();
        CompiledTape { arity, ops: b.ops, outputs }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Fresh scratch buffer sized for this tape.
    pub fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.ops.len()]
    }

    /// Evaluate all outputs at `x` into `out`.
    pub fn eval(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) -> Result<(), EvalError> {
        debug_assert_eq!(x.len(), self.arity);
        debug_assert_eq!(scratch.len(), self.ops.len());
        debug_assert_eq!(out.len(), self.outputs.len());
        for (i, op) in self.ops.iter().enumerate() {
            scratch[i] = match *op {
                Op::Var(j) => x[j as usize],
                Op::Const(c) => c,
                Op::Add(a, b) => scratch[a as usize] + scratch[b as usize],
                Op::Sub(a, b) => scratch[a as usize] - scratch[b as usize],
                Op::Mul(a, b) => scratch[a as usize] * scratch[b as usize],
                Op::Div(a, b) => {
                    let d = scratch[b as usize];
                    if d == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    scratch[a as usize] / d
                }
                Op::Pow(a, k) => {
                    let v = scratch[a as usize];
                    if k < 0 && v == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    v.powi(k)
                }
                Op::Neg(a) => -scratch[a as usize],
                Op::Sqrt(a) => {
                    let v = scratch[a as usize];
                    if v < 0.0 {
                        return Err(EvalError::SqrtNegative);
                    }
                    v.sqrt()
                }
                Op::Exp(a) => scratch[a as usize].exp(),
                Op::Sin(a) => scratch[a as usize].sin(),
                Op::Cos(a) => scratch[a as usize].cos(),
                Op::Tanh(a) => scratch[a as usize].tanh(),
            };
        }
        for (o, &slot) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[slot as usize];
        }
        Ok(())
    }
}
