//! Stage-filtered batch assembly. Every emitted batch is single-embodiment;
//! cross-embodiment mode round-robins across embodiments.

use std::collections::{BTreeMap, BTreeSet};

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::Tensor;
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::image::ObsImage;
use deskvla_model::vocab::Vocabulary;

use crate::episode::EpisodeRecord;
use crate::stats::NormStats;
use crate::{Result, WorldError};

/// Which episodes a training stage sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageFilter {
    /// Everything (stage 1).
    Cross,
    /// A single embodiment's episodes (stage 2).
    Embodiment(EmbodimentId),
    /// A task subset (stage 3); implicitly restricted to the embodiments
    /// that recorded those tasks.
    Task(BTreeSet<String>),
}

impl StageFilter {
    pub fn keeps(&self, rec: &EpisodeRecord) -> bool {
        match self {
            StageFilter::Cross => true,
            StageFilter::Embodiment(id) => &rec.embodiment == id,
            StageFilter::Task(tasks) => tasks.contains(&rec.task),
        }
    }
}

/// Language supervision source for a batch: stored substep phrases, or the
/// episode's direct instruction (ablation arm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReasoningSource {
    Substeps,
    DirectPrompt,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub views: Vec<ObsImage>,
    /// Normalized proprioception at the chunk's first step.
    pub proprio: Vec<f32>,
    /// Normalized action chunk, `H×D`, padded by repeating the final action.
    pub chunk: Tensor<f32>,
    /// 1 for real rows, 0 for padded rows, `H×D`.
    pub mask: Tensor<f32>,
    pub phrase_ids: Vec<u32>,
    pub instruction_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub embodiment: EmbodimentId,
    pub samples: Vec<TrainSample>,
}

/// Start-step stride for the deterministic sample index.
const SAMPLE_STRIDE: usize = 4;

/// Deterministic stream of single-embodiment batches over a loaded dataset.
pub struct BatchStream<'a> {
    episodes: Vec<&'a EpisodeRecord>,
    stats: &'a NormStats,
    vocab: &'a Vocabulary,
    horizon: usize,
    batch: usize,
    source: ReasoningSource,
    rng: DetRng,
    /// Per-embodiment queues of (episode index, start step).
    queues: BTreeMap<String, Vec<(usize, usize)>>,
    cursor: BTreeMap<String, usize>,
    order: Vec<String>,
    next_emb: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        records: &'a [EpisodeRecord],
        filter: &StageFilter,
        stats: &'a NormStats,
        vocab: &'a Vocabulary,
        horizon: usize,
        batch: usize,
        seed: u64,
        source: ReasoningSource,
    ) -> Result<Self> {
        let episodes: Vec<&EpisodeRecord> =
            records.iter().filter(|r| filter.keeps(r)).collect();
        if episodes.is_empty() {
            return Err(WorldError::EmptySelection(format!(
                "stage filter {filter:?} selected no episodes"
            )));
        }
        let mut stream = Self {
            episodes,
            stats,
            vocab,
            horizon,
            batch,
            source,
            rng: DetRng::new(seed),
            queues: BTreeMap::new(),
            cursor: BTreeMap::new(),
            order: Vec::new(),
            next_emb: 0,
        };
        stream.start_epoch();
        Ok(stream)
    }

    /// Samples in one epoch of the filtered index.
    pub fn epoch_len(&self) -> usize {
        self.episodes
            .iter()
            .map(|e| e.steps.len().div_ceil(SAMPLE_STRIDE))
            .sum()
    }

    pub fn batches_per_epoch(&self) -> usize {
        let mut total = 0usize;
        let mut by_emb: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.episodes {
            *by_emb.entry(e.embodiment.as_str()).or_insert(0) +=
                e.steps.len().div_ceil(SAMPLE_STRIDE);
        }
        for n in by_emb.values() {
            total += n.div_ceil(self.batch);
        }
        total
    }

    fn start_epoch(&mut self) {
        self.queues.clear();
        self.cursor.clear();
        for (i, ep) in self.episodes.iter().enumerate() {
            let q = self
                .queues
                .entry(ep.embodiment.as_str().to_string())
                .or_default();
            let mut start = 0;
            while start < ep.steps.len() {
                q.push((i, start));
                start += SAMPLE_STRIDE;
            }
        }
        for (emb, q) in self.queues.iter_mut() {
            let perm = self.rng.permutation(q.len());
            let shuffled: Vec<(usize, usize)> = perm.into_iter().map(|i| q[i]).collect();
            *q = shuffled;
            self.cursor.insert(emb.clone(), 0);
        }
        self.order = self.queues.keys().cloned().collect();
        self.next_emb = 0;
    }

    fn build_sample(&self, ep: &EpisodeRecord, start: usize) -> Result<TrainSample> {
        let emb = ep.embodiment.as_str();
        let step = &ep.steps[start];
        let views: Vec<ObsImage> = step.views.iter().map(|v| v.to_obs(&ep.palette)).collect();
        let proprio = self.stats.normalize_proprio(emb, &step.proprio)?;
        let d = step.action.len();
        let mut chunk = Vec::with_capacity(self.horizon * d);
        let mut mask = Vec::with_capacity(self.horizon * d);
        for k in 0..self.horizon {
            let idx = start + k;
            let (row, live) = if idx < ep.steps.len() {
                (&ep.steps[idx].action, 1.0)
            } else {
                (&ep.steps[ep.steps.len() - 1].action, 0.0)
            };
            chunk.extend(self.stats.normalize_action(emb, row)?);
            mask.extend(std::iter::repeat_n(live, d));
        }
        let phrase_ids = match self.source {
            ReasoningSource::DirectPrompt => ep.instruction.clone(),
            ReasoningSource::Substeps => match ep.annotation.segment_at(start) {
                Some(seg) => self.vocab.encode(&seg.phrase)?,
                None => ep.instruction.clone(),
            },
        };
        Ok(TrainSample {
            views,
            proprio,
            chunk: Tensor::new(vec![self.horizon, d], chunk)?,
            mask: Tensor::new(vec![self.horizon, d], mask)?,
            phrase_ids,
            instruction_ids: ep.instruction.clone(),
        })
    }

    /// Next single-embodiment batch; `None` ends the epoch (call
    /// `next_epoch` to reshuffle and continue).
    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        for _ in 0..self.order.len() {
            let emb = self.order[self.next_emb % self.order.len()].clone();
            self.next_emb += 1;
            let queue = &self.queues[&emb];
            let cursor = self.cursor[&emb];
            if cursor >= queue.len() {
                continue;
            }
            let end = (cursor + self.batch).min(queue.len());
            let picks: Vec<(usize, usize)> = queue[cursor..end].to_vec();
            self.cursor.insert(emb.clone(), end);
            let mut samples = Vec::with_capacity(picks.len());
            for (ep_i, start) in picks {
                samples.push(self.build_sample(self.episodes[ep_i], start)?);
            }
            return Ok(Some(Batch {
                embodiment: EmbodimentId::new(emb),
                samples,
            }));
        }
        Ok(None)
    }

    pub fn next_epoch(&mut self) {
        self.start_epoch();
    }
}
