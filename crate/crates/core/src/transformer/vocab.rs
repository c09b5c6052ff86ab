/// Token ids: codes `0..K`, then MASK, END, PAD. Prediction classes drop MASK:
/// class `c < K` is code `c`, class `K` is END, class `K+1` is PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    k: usize,
}

impl Vocab {
    pub fn new(codebook_size: usize) -> Self {
        Vocab { k: codebook_size }
    }

    pub fn codes(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> usize {
        self.k
    }

    pub fn end(&self) -> usize {
        self.k + 1
    }

    pub fn pad(&self) -> usize {
        self.k + 2
    }

    /// Embedding table rows.
    pub fn size(&self) -> usize {
        self.k + 3
    }

    /// Output head width.
    pub fn classes(&self) -> usize {
        self.k + 2
    }

    pub fn is_code(&self, token: usize) -> bool {
        token < self.k
    }

    pub fn class_of(&self, token: usize) -> Option<usize> {
        match token {
            t if t < self.k => Some(t),
            t if t == self.end() => Some(self.k),
            t if t == self.pad() => Some(self.k + 1),
            _ => None,
        }
    }

    pub fn token_of(&self, class: usize) -> usize {
        match class {
            c if c < self.k => c,
            c if c == self.k => self.end(),
            _ => self.pad(),
        }
    }
}
