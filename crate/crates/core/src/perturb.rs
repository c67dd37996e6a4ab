//! Binary mask space over word units, text reconstruction and mask samplers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::BitStream;
use crate::segment::Document;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("mask has {got} bits but the document has {expected} units")]
    LengthMismatch { expected: usize, got: usize },
    #[error("focus mask has no active units; nothing to perturb")]
    DegenerateFocus,
}

/// `true` keeps a unit, `false` removes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn ones(n: usize) -> Self {
        Mask { bits: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `true` marks a unit as active (perturbable), `false` as frozen.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FocusMask {
    pub bits: Vec<bool>,
}

impl FocusMask {
    pub fn all_active(n: usize) -> Self {
        FocusMask { bits: vec![true; n] }
    }

    pub fn from_active(n: usize, active: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; n];
        for i in active {
            bits[i] = true;
        }
        FocusMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    /// 0/1 encoding used in output files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }
}

/// How removed units are rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "mode", deny_unknown_fields)]
pub enum MaskMode {
    /// Removed units disappear.
    #[default]
    Delete,
    /// Removed units are replaced by a placeholder token.
    Replace { token: String },
}

#[derive(Debug, Clone)]
pub struct PerturbedSample {
    pub mask: Mask,
    pub text: String,
    pub prediction: Option<f64>,
    pub weight: Option<f64>,
}

/// Rebuild text from the kept units: single spaces within a paragraph, a blank
/// line between paragraphs. Paragraphs with no surviving unit vanish.
pub fn apply_mask(mask: &Mask, doc: &Document) -> Result<String, PerturbError> {
    apply_mask_with(mask, doc, &MaskMode::Delete)
}

pub fn apply_mask_with(
    mask: &Mask,
    doc: &Document,
    mode: &MaskMode,
) -> Result<String, PerturbError> {
    if mask.len() != doc.len() {
        return Err(PerturbError::LengthMismatch {
            expected: doc.len(),
            got: mask.len(),
        });
    }
    let mut out = String::with_capacity(doc.text.len());
    let mut pending_break = false;
    let mut any = false;
    for (i, unit) in doc.units.iter().enumerate() {
        let piece = match (mask.bits[i], mode) {
            (true, _) => Some(unit.surface.as_str()),
            (false, MaskMode::Delete) => None,
            (false, MaskMode::Replace { token }) => Some(token.as_str()),
        };
        if let Some(piece) = piece {
            if any {
                out.push_str(if pending_break { "\n\n" } else { " " });
            }
            out.push_str(piece);
            any = true;
            pending_break = false;
        }
        if doc.paragraph_break_after(i) {
            pending_break = true;
        }
    }
    Ok(out)
}

/// `k` masks over `n` features, bits i.i.d. Bernoulli(0.5). Sample 0 is all ones.
pub fn sample_unconstrained(n: usize, k: usize, seed: u64) -> Vec<Mask> {
    sample_constrained(&FocusMask::all_active(n), k, seed)
        .expect("an all-active mask of width n >= 1 is never degenerate")
}

/// `k` masks that keep every frozen unit and flip a fair coin for each active
/// unit. Sample 0 is all ones.
pub fn sample_constrained(
    focus: &FocusMask,
    k: usize,
    seed: u64,
) -> Result<Vec<Mask>, PerturbError> {
    if focus.n_active() == 0 {
        return Err(PerturbError::DegenerateFocus);
    }
    let n = focus.len();
    let active = focus.active_indices();
    let mut bits = BitStream::new(seed);
    let mut out = Vec::with_capacity(k);
    if k > 0 {
        out.push(Mask::ones(n));
    }
    for _ in 1..k {
        let mut m = Mask::ones(n);
        for &i in &active {
            m.bits[i] = bits.next_bit();
        }
        out.push(m);
    }
    Ok(out)
}
