//! Tokenized transition datasets and their JSON-lines file format.
//!
//! The first line is a [`DatasetHeader`]; every following line is one
//! [`TransitionRecord`], grouped by episode in step order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};
use crate::frame::{FrameTokens, GridShape};
use crate::gridworld::{render_image, EpisodeRecord, GridConfig, Symbol};
use crate::tokenizer::{encode_frame, grow_from_image, Codebook};

pub const DATASET_FORMAT: &str = "itc-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub grid_height: usize,
    pub grid_width: usize,
    pub alphabet: Vec<String>,
    pub codebook_hash: String,
    pub codebook_size: usize,
    pub seed: u64,
    pub episodes: usize,
}

/// One line of the dataset file. Flags are stored as 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode: usize,
    pub t: usize,
    pub s_t: Vec<u32>,
    pub a_t: u32,
    pub s_next: Vec<u32>,
    pub r_t: u8,
    pub d_t: u8,
    pub has_creature: u8,
}

/// A tokenized episode: `frames.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: usize,
    pub frames: Vec<FrameTokens>,
    pub actions: Vec<u32>,
    pub rewards: Vec<u8>,
    pub dones: Vec<bool>,
    pub has_creature: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn shape(&self) -> GridShape {
        GridShape::new(self.header.grid_height, self.header.grid_width)
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// First episode index of the held-out split (last 10% of episodes).
    pub fn holdout_start(&self) -> usize {
        let n = self.episodes.len();
        n - n.div_ceil(10)
    }

    pub fn train_episodes(&self) -> &[Episode] {
        &self.episodes[..self.holdout_start()]
    }

    pub fn holdout_episodes(&self) -> &[Episode] {
        &self.episodes[self.holdout_start()..]
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for ep in &self.episodes {
            for t in 0..ep.len() {
                let rec = TransitionRecord {
                    episode: ep.index,
                    t,
                    s_t: ep.frames[t].tokens().to_vec(),
                    a_t: ep.actions[t],
                    s_next: ep.frames[t + 1].tokens().to_vec(),
                    r_t: ep.rewards[t],
                    d_t: u8::from(ep.dones[t]),
                    has_creature: u8::from(ep.has_creature[t]),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(ItcError::Format("empty dataset file".into())),
        };
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(ItcError::Format(format!("unsupported dataset {} v{}", header.format, header.version)));
        }
        let shape = GridShape::new(header.grid_height, header.grid_width);
        let mut episodes: Vec<Episode> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TransitionRecord = serde_json::from_str(&line)?;
            let s_t = FrameTokens::new(shape, rec.s_t)?;
            let s_next = FrameTokens::new(shape, rec.s_next)?;
            let continues = episodes.last().is_some_and(|ep| ep.index == rec.episode);
            if !continues {
                if rec.t != 0 {
                    return Err(ItcError::Format(format!("episode {} starts at step {}", rec.episode, rec.t)));
                }
                episodes.push(Episode {
                    index: rec.episode,
                    frames: vec![s_t.clone()],
                    actions: Vec::new(),
                    rewards: Vec::new(),
                    dones: Vec::new(),
                    has_creature: Vec::new(),
                });
            }
            let ep = episodes.last_mut().expect("pushed above");
            if rec.t != ep.len() || ep.frames.last() != Some(&s_t) {
                return Err(ItcError::Format(format!("episode {} step {} out of sequence", rec.episode, rec.t)));
            }
            ep.frames.push(s_next);
            ep.actions.push(rec.a_t);
            ep.rewards.push(rec.r_t);
            ep.dones.push(rec.d_t != 0);
            ep.has_creature.push(rec.has_creature != 0);
        }
        Ok(Self { header, episodes })
    }
}

/// Grows `codebook` over every frame in collection order, then tokenizes.
pub fn build_dataset(records: &[EpisodeRecord], grid: &GridConfig, codebook: &mut Codebook, seed: u64) -> Result<Dataset> {
    let (h, w) = (grid.height, grid.width);
    for rec in records {
        for f in &rec.frames {
            grow_from_image(&render_image(h, w, f)?, codebook)?;
        }
    }
    let mut episodes = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let frames = rec
            .frames
            .iter()
            .map(|f| encode_frame(&render_image(h, w, f)?, codebook))
            .collect::<Result<Vec<_>>>()?;
        let has_creature = rec.frames[..rec.len()]
            .iter()
            .map(|f| f.contains(&Symbol::Creature))
            .collect();
        episodes.push(Episode {
            index,
            frames,
            actions: rec.actions.iter().map(|&a| a as u32).collect(),
            rewards: rec.rewards.clone(),
            dones: rec.dones.clone(),
            has_creature,
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            grid_height: h,
            grid_width: w,
            alphabet: Symbol::ALL.iter().map(|s| s.name().to_string()).collect(),
            codebook_hash: codebook.hash(),
            codebook_size: codebook.len(),
            seed,
            episodes: records.len(),
        },
        episodes,
    })
}

/// Symbol of every token, read from the dominant channel of its code.
pub fn symbol_table(codebook: &Codebook) -> Vec<Symbol> {
    (0..codebook.len() as u32)
        .map(|t| {
            let code = codebook.code(t).expect("token in range");
            let v = code.values();
            let c = codebook.patch_shape().c;
            let mut channel = vec![0.0f32; c];
            for (i, x) in v.iter().enumerate() {
                channel[i % c] += x;
            }
            let best = (0..c).fold(0, |b, k| if channel[k] > channel[b] { k } else { b });
            Symbol::from_index(best).unwrap_or(Symbol::Floor)
        })
        .collect()
}
