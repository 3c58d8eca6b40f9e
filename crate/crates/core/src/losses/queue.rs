use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Fixed-capacity FIFO of L2-normalized momentum embeddings, one ring for
/// images and one for texts, written in lockstep.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueState {
    capacity: usize,
    dim: usize,
    q_img: Vec<f64>,
    q_txt: Vec<f64>,
    ids: Vec<Option<usize>>,
    cursor: usize,
    filled: usize,
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    row.iter().map(|v| v / n).collect()
}

impl QueueState {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            q_img: vec![0.0; capacity * dim],
            q_txt: vec![0.0; capacity * dim],
            ids: vec![None; capacity],
            cursor: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Next slot to be written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Appends matching rows of `images` and `texts`, overwriting the oldest
    /// entries once full.
    pub fn enqueue(&mut self, images: &Tensor, texts: &Tensor) -> Result<()> {
        self.enqueue_with_ids(images, texts, None)
    }

    /// As [`enqueue`](Self::enqueue), tagging each row with its identity.
    pub fn enqueue_with_ids(&mut self, images: &Tensor, texts: &Tensor, ids: Option<&[usize]>) -> Result<()> {
        if images.shape() != texts.shape() || images.cols() != self.dim {
            return Err(Error::shape("enqueue", images.shape(), texts.shape()));
        }
        if ids.is_some_and(|ids| ids.len() != images.rows()) {
            return Err(Error::Argument(format!("{} ids for {} rows", ids.map_or(0, |i| i.len()), images.rows())));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for r in 0..images.rows() {
            let at = self.cursor * self.dim;
            self.q_img[at..at + self.dim].copy_from_slice(&normalized(images.row_slice(r)));
            self.q_txt[at..at + self.dim].copy_from_slice(&normalized(texts.row_slice(r)));
            self.ids[self.cursor] = ids.map(|ids| ids[r]);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    fn rows(&self, buf: &[f64]) -> Option<Tensor> {
        (self.filled > 0).then(|| {
            Tensor::matrix(self.filled, self.dim, buf[..self.filled * self.dim].to_vec()).expect("queue rows")
        })
    }

    /// Stored image embeddings in slot order, `None` while empty.
    pub fn images(&self) -> Option<Tensor> {
        self.rows(&self.q_img)
    }

    pub fn texts(&self) -> Option<Tensor> {
        self.rows(&self.q_txt)
    }

    /// Identity of each stored row in slot order, `None` where untagged.
    pub fn ids(&self) -> &[Option<usize>] {
        &self.ids[..self.filled]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wraps_and_overwrites_oldest() {
        let mut q = QueueState::new(3, 2);
        for i in 0..4 {
            let t = Tensor::row(&[1.0 + i as f64, 0.5]);
            q.enqueue(&t, &t).unwrap();
        }
        assert_eq!(q.cursor(), 1);
        assert_eq!(q.len(), 3);
        let imgs = q.images().unwrap();
        let expect = normalized(&[4.0, 0.5]);
        assert_eq!(imgs.row_slice(0), expect.as_slice());
    }

    #[test]
    fn stored_rows_are_unit_norm() {
        let mut q = QueueState::new(5, 3);
        let t = Tensor::from_rows(&[vec![3.0, 4.0, 0.0], vec![-1.0, 2.0, 9.0]]).unwrap();
        q.enqueue(&t, &t.scale(0.1)).unwrap();
        for buf in [q.images().unwrap(), q.texts().unwrap()] {
            for n in buf.row_norms() {
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
        assert!(q.enqueue(&t, &Tensor::zeros(&[1, 3])).is_err());
        assert!(QueueState::new(4, 3).images().is_none());
    }
}
