/// How an operand's elements map onto a larger output.
///
/// Only trailing-dimension expansion is supported: the smaller operand
/// either matches a suffix of the output shape (`Cycle`, e.g. a bias row
/// added to every row of a batch) or matches a prefix padded with trailing
/// unit extents (`Stretch`, e.g. a per-row scale `[B,1]` against `[B,3]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    Cycle(usize),
    Stretch(usize),
}

impl Broadcast {
    #[inline]
    pub fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cycle(n) => i % n,
            Broadcast::Stretch(f) => i / f,
        }
    }
}

fn fits(small: &[usize], big: &[usize]) -> Option<Broadcast> {
    let len_small: usize = small.iter().product();
    let len_big: usize = big.iter().product();
    if len_small == 0 || len_big == 0 {
        return None;
    }
    if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        return Some(if len_small == len_big {
            Broadcast::Same
        } else {
            Broadcast::Cycle(len_small)
        });
    }
    let keep = small.iter().rposition(|&e| e != 1).map_or(0, |p| p + 1);
    let head = &small[..keep];
    if head.len() <= big.len() && big[..head.len()] == *head {
        return Some(Broadcast::Stretch(len_big / len_small));
    }
    None
}

/// Output shape and per-operand mapping for an element-wise binary op.
pub(crate) fn resolve(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Broadcast, Broadcast)> {
    if a == b {
        return Some((a.to_vec(), Broadcast::Same, Broadcast::Same));
    }
    let len_a: usize = a.iter().product();
    let len_b: usize = b.iter().product();
    if len_a >= len_b {
        if let Some(m) = fits(b, a) {
            return Some((a.to_vec(), Broadcast::Same, m));
        }
    }
    if len_b >= len_a {
        if let Some(m) = fits(a, b) {
            return Some((b.to_vec(), m, Broadcast::Same));
        }
    }
    None
}
