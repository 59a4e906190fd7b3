//! Trailing-dimension broadcasting for binary elementwise ops.

use super::Element;

/// How an operand's elements map onto the broadcast output.
#[derive(Clone, Debug)]
pub(crate) enum Layout {
    /// Same number of elements, one-to-one.
    Same,
    /// Operand repeats with period `len` (it equals a suffix of the output shape).
    Cycle(usize),
    /// Arbitrary size-1 expansion; explicit input index per output element.
    Gather(Vec<usize>),
}

impl Layout {
    #[inline]
    pub(crate) fn index(&self, out: usize) -> usize {
        match self {
            Layout::Same => out,
            Layout::Cycle(len) => out % len,
            Layout::Gather(idx) => idx[out],
        }
    }
}

/// Output shape of broadcasting `a` against `b`, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_back(a, rank - 1 - i);
        let db = dim_from_back(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_back(shape: &[usize], from_back: usize) -> usize {
    if from_back < shape.len() {
        shape[shape.len() - 1 - from_back]
    } else {
        1
    }
}

pub(crate) fn layout(input: &[usize], out: &[usize]) -> Layout {
    let numel: usize = input.iter().product();
    let out_numel: usize = out.iter().product();
    if numel == out_numel {
        return Layout::Same;
    }
    // Strip leading ones; if what remains is a suffix of `out` the operand cycles.
    let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
    let core = &input[first..];
    if core.is_empty() {
        return Layout::Cycle(1);
    }
    if core.len() <= out.len() && out[out.len() - core.len()..] == *core {
        return Layout::Cycle(numel);
    }
    Layout::Gather(gather_indices(input, out))
}

fn gather_indices(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..input.len()).rev() {
        strides[offset + i] = if input[i] == 1 { 0 } else { stride };
        stride *= input[i];
    }
    let out_numel: usize = out.iter().product();
    let mut idx = Vec::with_capacity(out_numel);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..out_numel {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Sum an output-shaped gradient back onto an operand of `numel` elements.
pub(crate) fn reduce<E: Element>(grad: &[E], layout: &Layout, numel: usize) -> Vec<E> {
    match layout {
        Layout::Same => grad.to_vec(),
        _ => {
            let mut acc = vec![E::zero(); numel];
            for (i, &g) in grad.iter().enumerate() {
                let j = layout.index(i);
                acc[j] = acc[j] + g;
            }
            acc
        }
    }
}
