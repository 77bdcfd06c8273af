use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::LmExample;
use crate::tokenizer::{TokenSeq, BOS, EOS, PAD};

/// Fixed-width rows each holding up to `packing_factor` BOS…EOS segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    /// `B × max_seq_len`, right-padded with PAD.
    pub tokens: Vec<Vec<u32>>,
    /// Segment number per position, starting at 1; 0 marks padding.
    pub segments: Vec<Vec<u32>>,
    /// True where the next token belongs to the same segment.
    pub loss_mask: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackingOutcome {
    pub batches: Vec<PackedBatch>,
    /// Sentences cut to fit `max_seq_len`.
    pub truncated: usize,
}

struct OpenRow {
    tokens: Vec<u32>,
    segments: Vec<u32>,
    count: u32,
}

/// Shuffles `sentences` under `seed`, then packs them first-fit into rows of
/// `max_seq_len` tokens with at most `packing_factor` sentences per row.
pub fn pack_batches(
    sentences: &[TokenSeq],
    max_seq_len: usize,
    packing_factor: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PackingOutcome> {
    if sentences.is_empty() {
        return Err(Error::Argument("no sentences to pack".into()));
    }
    if max_seq_len < 2 || packing_factor == 0 || batch_size == 0 {
        return Err(Error::Config(format!(
            "cannot pack with max_seq_len={max_seq_len}, packing_factor={packing_factor}, batch_size={batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let room = max_seq_len - 2;
    let mut truncated = 0;
    let mut rows: Vec<OpenRow> = Vec::new();
    for i in order {
        let ids = &sentences[i].ids;
        let body = if ids.len() > room {
            truncated += 1;
            &ids[..room]
        } else {
            &ids[..]
        };
        let need = body.len() + 2;
        let slot = rows
            .iter()
            .position(|r| r.count < packing_factor as u32 && r.tokens.len() + need <= max_seq_len);
        let row = match slot {
            Some(r) => &mut rows[r],
            None => {
                rows.push(OpenRow {
                    tokens: Vec::with_capacity(max_seq_len),
                    segments: Vec::with_capacity(max_seq_len),
                    count: 0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.count += 1;
        row.tokens.push(BOS);
        row.tokens.extend_from_slice(body);
        row.tokens.push(EOS);
        row.segments.extend(std::iter::repeat_n(row.count, need));
    }
    if truncated > 0 {
        log::warn!("{truncated} sentence(s) truncated to {room} tokens");
    }

    let batches = rows
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = PackedBatch {
                tokens: Vec::new(),
                segments: Vec::new(),
                loss_mask: Vec::new(),
            };
            for r in chunk {
                let mut tokens = r.tokens.clone();
                let mut segments = r.segments.clone();
                tokens.resize(max_seq_len, PAD);
                segments.resize(max_seq_len, 0);
                let mask = (0..max_seq_len)
                    .map(|t| segments[t] != 0 && t + 1 < max_seq_len && segments[t + 1] == segments[t])
                    .collect();
                batch.tokens.push(tokens);
                batch.segments.push(segments);
                batch.loss_mask.push(mask);
            }
            batch
        })
        .collect();
    Ok(PackingOutcome { batches, truncated })
}

impl PackedBatch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Model inputs with positions restarting at every segment. With
    /// `trim_padding` each row stops at its last non-PAD token, which leaves
    /// loss and gradients unchanged.
    pub fn to_examples(&self, trim_padding: bool) -> Vec<LmExample> {
        (0..self.rows())
            .map(|r| {
                let (tokens, segments, mask) = (&self.tokens[r], &self.segments[r], &self.loss_mask[r]);
                let len = if trim_padding {
                    segments.iter().rposition(|&s| s != 0).map_or(1, |p| p + 1)
                } else {
                    tokens.len()
                };
                let mut positions = Vec::with_capacity(len);
                let mut pos = 0;
                for t in 0..len {
                    if t > 0 && segments[t] != segments[t - 1] {
                        pos = 0;
                    }
                    positions.push(pos);
                    pos += 1;
                }
                LmExample {
                    tokens: tokens[..len].to_vec(),
                    segments: segments[..len].to_vec(),
                    positions,
                    targets: (0..len).map(|t| mask[t].then(|| tokens[t + 1])).collect(),
                }
            })
            .collect()
    }
}
