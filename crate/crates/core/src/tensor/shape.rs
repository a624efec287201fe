use crate::error::{shape_err, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed inside `target` (same rank after left-padding);
/// broadcast axes get stride 0.
pub(crate) fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let pad = target.len() - src.len();
    let own = strides_of(src);
    (0..target.len())
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// For each row-major index of `shape`, the linear offset under `strides`.
pub(crate) fn offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    if shape.is_empty() {
        out.push(0);
        return out;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(base + j * inner_stride);
        }
        // advance the outer odometer
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            base -= strides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 5], &[3, 1]).unwrap(), vec![4, 3, 5]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn offsets_follow_strides() {
        let shape = [2, 3];
        assert_eq!(offsets(&shape, &strides_of(&shape)), vec![0, 1, 2, 3, 4, 5]);
        // [3] broadcast into [2,3]
        let s = broadcast_strides(&[3], &shape);
        assert_eq!(offsets(&shape, &s), vec![0, 1, 2, 0, 1, 2]);
        // [2,1] broadcast into [2,3]
        let s = broadcast_strides(&[2, 1], &shape);
        assert_eq!(offsets(&shape, &s), vec![0, 0, 0, 1, 1, 1]);
    }
}
