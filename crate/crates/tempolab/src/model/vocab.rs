use crate::corpus::CANONICAL_RESIDUES;

/// Fixed 26-token vocabulary.
///
/// Id layout: 0 <pad>, 1 <bos>, 2 <eos>, 3 <mask>, 4 <unk> (reserved, never
/// produced by tokenization), 5..=24 the canonical residues in alphabet
/// order, 25 X. X is a predictable token but never a masking target.
#[derive(Debug)]
pub struct Vocabulary {
    residue_ids: [u16; 256],
}

static VOCAB: std::sync::OnceLock<Vocabulary> = std::sync::OnceLock::new();

impl Vocabulary {
    pub const PAD: u16 = 0;
    pub const BOS: u16 = 1;
    pub const EOS: u16 = 2;
    pub const MASK: u16 = 3;
    pub const UNK: u16 = 4;
    pub const FIRST_RESIDUE: u16 = 5;
    pub const X: u16 = 25;
    pub const SIZE: usize = 26;

    fn build() -> Vocabulary {
        let mut residue_ids = [Self::UNK; 256];
        for (i, &c) in CANONICAL_RESIDUES.iter().enumerate() {
            residue_ids[c as usize] = Self::FIRST_RESIDUE + i as u16;
        }
        residue_ids[b'X' as usize] = Self::X;
        Vocabulary { residue_ids }
    }

    pub fn get() -> &'static Vocabulary {
        VOCAB.get_or_init(Vocabulary::build)
    }

    /// Token id of a normalized residue byte.
    pub fn id_of(&self, residue: u8) -> u16 {
        self.residue_ids[residue as usize]
    }

    /// Residue byte of a token id, None for special tokens.
    pub fn residue_of(&self, id: u16) -> Option<u8> {
        if (Self::FIRST_RESIDUE..Self::X).contains(&id) {
            Some(CANONICAL_RESIDUES[(id - Self::FIRST_RESIDUE) as usize])
        } else if id == Self::X {
            Some(b'X')
        } else {
            None
        }
    }

    /// True for the 20 canonical residue tokens (excludes X and specials).
    pub fn is_canonical_token(id: u16) -> bool {
        (Self::FIRST_RESIDUE..Self::FIRST_RESIDUE + 20).contains(&id)
    }

    /// Positions with these tokens are eligible for masking.
    pub fn is_maskable(id: u16) -> bool {
        Self::is_canonical_token(id)
    }
}
