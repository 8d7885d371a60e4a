//! Dynamic selection of the smoothing parameter `τ`.
//!
//! Every mini-batch is first used to score the current estimate of each
//! candidate chain (`V_k`), then to update it. Scores are averaged over
//! blocks of `q` mini-batches (`BV_n`) and smoothed exponentially
//! (`ABV_n = (1 − ω) BV_n + ω ABV_{n−1}`). After each block the beam keeps
//! the `W` chains with the smallest ABV and branches each into `B` children
//! on a multiplicative `τ` grid.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{FpcaError, Result};
use crate::model::{data_loss, DesignedSubject, ModelParams, Problem};
use crate::optim::{ChainOptimizer, StepSchedule};
use crate::scalar::Scalar;

/// Smallest `τ` produced by expansion.
pub const TAU_FLOOR: f64 = 1e-16;

/// Block-averaged exponentially weighted validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct AbvState<T: Scalar> {
    pub omega: T,
    pub q: usize,
    block_sum: T,
    block_count: usize,
    pub abv: T,
    pub blocks_seen: usize,
}

impl<T: Scalar> AbvState<T> {
    pub fn new(omega: T, q: usize) -> Result<Self> {
        if !(omega > T::zero() && omega < T::one()) {
            return Err(FpcaError::Config(format!("ω = {omega} must lie in (0, 1)")));
        }
        if q == 0 {
            return Err(FpcaError::Config("block size q must be at least 1".into()));
        }
        Ok(Self {
            omega,
            q,
            block_sum: T::zero(),
            block_count: 0,
            abv: T::zero(),
            blocks_seen: 0,
        })
    }

    /// Adds one validation score; returns the block score `BV_n` when this
    /// score completes a block.
    pub fn push(&mut self, v: T) -> Option<T> {
        self.block_sum += v;
        self.block_count += 1;
        if self.block_count < self.q {
            return None;
        }
        let bv = self.block_sum / T::from_usize_lossy(self.q);
        self.abv = (T::one() - self.omega) * bv + self.omega * self.abv;
        self.block_sum = T::zero();
        self.block_count = 0;
        self.blocks_seen += 1;
        Some(bv)
    }

    /// Functional form of [`push`](Self::push).
    pub fn accumulate(&self, v: T) -> Self {
        let mut next = self.clone();
        next.push(v);
        next
    }

    /// Scores received in the current, incomplete block.
    pub fn pending(&self) -> usize {
        self.block_count
    }

    /// Folds an incomplete block as if it were complete; returns its average.
    pub fn flush(&mut self) -> Option<T> {
        if self.block_count == 0 {
            return None;
        }
        let bv = self.block_sum / T::from_usize_lossy(self.block_count);
        self.abv = (T::one() - self.omega) * bv + self.omega * self.abv;
        self.block_sum = T::zero();
        self.block_count = 0;
        self.blocks_seen += 1;
        Some(bv)
    }
}

/// `V_k`: unpenalized average discrepancy of `params` on the batch.
pub fn validation_score<T: Scalar>(
    batch: &[DesignedSubject<T>],
    params: &ModelParams<T>,
) -> Result<T> {
    data_loss(batch, params)
}

/// Per-step trace of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T: Scalar> {
    pub step: usize,
    /// `‖S_k^Θ‖` in the `G` metric.
    pub grad_norm: T,
    pub score: T,
    pub tau: T,
    pub lambda: DVector<T>,
    pub sigma2: T,
    /// `‖ΘᵀGΘ − I‖_F` of the new iterate.
    pub residual: T,
}

/// One `(τ, Ψ)` chain of the beam.
#[derive(Debug, Clone)]
pub struct Candidate<T: Scalar> {
    pub id: usize,
    pub tau: T,
    /// Lattice origin `τ₀`; the chain sits at `τ₀·ρ^(offset/2)`. The beam
    /// records each node's `τ`, so revisiting a node reproduces it exactly.
    pub tau_origin: T,
    /// Lattice position in half powers of `ρ`.
    pub tau_offset: i32,
    pub params: ModelParams<T>,
    pub optimizer: ChainOptimizer<T>,
    pub abv: AbvState<T>,
    /// `(block, τ)` from which each segment of this chain was run.
    pub lineage: Vec<(usize, T)>,
    pub history: Vec<StepRecord<T>>,
    /// Re-orthonormalize every this many steps; 0 disables.
    pub reorth_every: usize,
}

impl<T: Scalar> Candidate<T> {
    pub fn new(
        id: usize,
        tau: T,
        params: ModelParams<T>,
        optimizer: ChainOptimizer<T>,
        abv: AbvState<T>,
    ) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(FpcaError::Config(format!(
                "smoothing parameter {tau} must be positive"
            )));
        }
        Ok(Self {
            id,
            tau,
            tau_origin: tau,
            tau_offset: 0,
            params,
            optimizer,
            abv,
            lineage: vec![(0, tau)],
            history: Vec::new(),
            reorth_every: 0,
        })
    }

    /// Scores, then updates on each batch in turn with this chain's `τ`.
    pub fn run(
        &mut self,
        problem: &Problem<T>,
        batches: &[Vec<DesignedSubject<T>>],
        schedule: &StepSchedule<T>,
        track_abv: bool,
    ) -> Result<()> {
        for batch in batches {
            let out = self
                .optimizer
                .step(problem, &self.params, batch, self.tau, schedule)?;
            if track_abv {
                self.abv.push(out.score);
            }
            self.params = out.params;
            if self.reorth_every > 0 && self.optimizer.k.is_multiple_of(self.reorth_every) {
                self.optimizer
                    .reorthonormalize(&problem.manifold, &mut self.params)?;
            }
            self.history.push(StepRecord {
                step: self.optimizer.k,
                grad_norm: out.grad_norm,
                score: out.score,
                tau: self.tau,
                lambda: self.params.lambda(),
                sigma2: self.params.sigma2(),
                residual: problem.manifold.residual(self.params.theta.matrix()),
            });
        }
        Ok(())
    }

    /// Current estimate: the running average when enabled, else the iterate.
    pub fn estimate(&self) -> ModelParams<T> {
        self.optimizer.estimate(&self.params)
    }
}

/// Beam geometry and ABV constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig<T: Scalar> {
    pub width: usize,
    pub branching: usize,
    pub ratio: T,
    pub omega: T,
    pub q: usize,
}

impl<T: Scalar> BeamConfig<T> {
    pub fn candidates(&self) -> usize {
        self.width * self.branching
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.branching == 0 {
            return Err(FpcaError::Config(
                "beam width and branching factor must be positive".into(),
            ));
        }
        if !(self.ratio > T::zero()) {
            return Err(FpcaError::Config("expansion ratio must be positive".into()));
        }
        AbvState::new(self.omega, self.q).map(|_| ())
    }

    /// Multiplicative offsets `ρ^(j − (B−1)/2)` for the children of one survivor.
    pub fn child_factors(&self) -> Vec<T> {
        self.child_offsets()
            .into_iter()
            .map(|o| self.lattice_factor(o))
            .collect()
    }

    /// Child exponents `2j − (B−1)` in half powers of `ρ`.
    pub fn child_offsets(&self) -> Vec<i32> {
        (0..self.branching as i32)
            .map(|j| 2 * j - (self.branching as i32 - 1))
            .collect()
    }

    /// `ρ^(offset/2)`.
    pub fn lattice_factor(&self, offset: i32) -> T {
        if offset % 2 == 0 {
            self.ratio.powi(offset / 2)
        } else {
            self.ratio.powf(T::lit(offset as f64 * 0.5))
        }
    }
}

/// One line of the tuning-path log.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningRecord<T: Scalar> {
    pub block: usize,
    pub candidate: usize,
    pub tau: T,
    pub abv: T,
    pub selected: bool,
}

/// The `C = W·B` candidate chains.
#[derive(Debug, Clone)]
pub struct Beam<T: Scalar> {
    pub candidates: Vec<Candidate<T>>,
    pub config: BeamConfig<T>,
    pub blocks_done: usize,
    next_id: usize,
    /// `(origin, offset, τ)` of every lattice node visited so far.
    nodes: Vec<(T, i32, T)>,
    /// `τ` of the best candidate after each completed block.
    pub selected_path: Vec<(usize, T)>,
    pub log: Vec<TuningRecord<T>>,
    /// Largest `‖ΘᵀGΘ − I‖_F` over every iterate of every chain.
    pub max_residual: T,
}

impl<T: Scalar> Beam<T> {
    /// All chains start from the same `Ψ₀` and optimizer state.
    pub fn new(
        initial: &ModelParams<T>,
        optimizer: &ChainOptimizer<T>,
        taus: &[T],
        config: BeamConfig<T>,
    ) -> Result<Self> {
        config.validate()?;
        if taus.len() != config.candidates() {
            return Err(FpcaError::Config(format!(
                "{} initial smoothing parameters for W·B = {} candidates",
                taus.len(),
                config.candidates()
            )));
        }
        let mut candidates = taus
            .iter()
            .enumerate()
            .map(|(id, &tau)| {
                Candidate::new(
                    id,
                    tau,
                    initial.clone(),
                    optimizer.clone(),
                    AbvState::new(config.omega, config.q)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let origin = taus[0];
        let log_step = config.ratio.ln() * T::lit(0.5);
        let mut nodes = Vec::new();
        for c in &mut candidates {
            // Put τ on the first τ's lattice when it lies on it.
            let offset = ((c.tau / origin).ln() / log_step).round().to_i32();
            if let Some(offset) = offset {
                let on_lattice = origin * config.lattice_factor(offset);
                if (on_lattice - c.tau).abs() <= T::lit(64.0 * T::EPS) * c.tau {
                    c.tau_origin = origin;
                    c.tau_offset = offset;
                }
            }
            if !nodes
                .iter()
                .any(|&(o, k, _)| o == c.tau_origin && k == c.tau_offset)
            {
                nodes.push((c.tau_origin, c.tau_offset, c.tau));
            }
        }
        Ok(Self {
            next_id: candidates.len(),
            candidates,
            nodes,
            config,
            blocks_done: 0,
            selected_path: Vec::new(),
            log: Vec::new(),
            max_residual: T::zero(),
        })
    }

    pub fn set_reorth_every(&mut self, every: usize) {
        for c in &mut self.candidates {
            c.reorth_every = every;
        }
    }

    /// Stage 1: every chain runs the batches with its `τ` fixed.
    pub fn update(
        &mut self,
        problem: &Problem<T>,
        batches: &[Vec<DesignedSubject<T>>],
        schedule: &StepSchedule<T>,
    ) -> Result<()> {
        let n = batches.len();
        self.candidates
            .par_iter_mut()
            .try_for_each(|c| c.run(problem, batches, schedule, true))?;
        for c in &self.candidates {
            for h in &c.history[c.history.len().saturating_sub(n)..] {
                self.max_residual = self.max_residual.max(h.residual);
            }
        }
        Ok(())
    }

    /// Candidate indices ordered by ABV, then `τ`, then position.
    fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.candidates.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ca, cb) = (&self.candidates[a], &self.candidates[b]);
            ca.abv
                .abv
                .partial_cmp(&cb.abv.abv)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(
                    ca.tau
                        .partial_cmp(&cb.tau)
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
                .then(a.cmp(&b))
        });
        idx
    }

    /// Logs the block and returns the positions of the `keep` best chains.
    fn select(&mut self, keep: usize) -> Vec<usize> {
        self.blocks_done += 1;
        let block = self.blocks_done;
        let ranking = self.ranking();
        let survivors: Vec<usize> = ranking[..keep.min(ranking.len())].to_vec();
        self.selected_path
            .push((block, self.candidates[ranking[0]].tau));
        for (pos, c) in self.candidates.iter().enumerate() {
            self.log.push(TuningRecord {
                block,
                candidate: c.id,
                tau: c.tau,
                abv: c.abv.abv,
                selected: survivors.contains(&pos),
            });
        }
        survivors
    }

    /// Stages 2 and 3: keep the `W` best chains, branch each into `B` children.
    pub fn select_and_expand(&mut self) {
        let survivors = self.select(self.config.width);
        let block = self.blocks_done;
        let offsets = self.config.child_offsets();
        let floor = T::lit(TAU_FLOOR);
        let mut next = Vec::with_capacity(self.config.candidates());
        for &s in &survivors {
            for &o in &offsets {
                let mut child = self.candidates[s].clone();
                child.id = self.next_id;
                self.next_id += 1;
                child.tau_offset += o;
                child.tau = self.node_tau(child.tau_origin, child.tau_offset).max(floor);
                child.lineage.push((block, child.tau));
                next.push(child);
            }
        }
        self.candidates = next;
    }

    /// `τ` of a lattice node; computed on the first visit, reused afterwards.
    fn node_tau(&mut self, origin: T, offset: i32) -> T {
        if let Some(&(_, _, tau)) = self
            .nodes
            .iter()
            .find(|&&(o, k, _)| o == origin && k == offset)
        {
            return tau;
        }
        let tau = origin * self.config.lattice_factor(offset);
        self.nodes.push((origin, offset, tau));
        tau
    }

    /// One full round on a block of `q` mini-batches.
    pub fn round(
        &mut self,
        problem: &Problem<T>,
        block: &[Vec<DesignedSubject<T>>],
        schedule: &StepSchedule<T>,
    ) -> Result<()> {
        if block.len() != self.config.q {
            return Err(FpcaError::Argument(format!(
                "block has {} mini-batches, expected {}",
                block.len(),
                self.config.q
            )));
        }
        self.update(problem, block, schedule)?;
        self.select_and_expand();
        Ok(())
    }

    /// Candidate with the smallest ABV (ties: smaller `τ`, then lower index).
    pub fn best_candidate(&self) -> Result<&Candidate<T>> {
        if self.blocks_done == 0 && self.candidates.iter().all(|c| c.abv.blocks_seen == 0) {
            return Err(FpcaError::State("no block has completed yet".into()));
        }
        Ok(&self.candidates[self.ranking()[0]])
    }

    /// Ends tuning: folds any incomplete block into the scores, logs it as a
    /// final block and returns the best chain.
    pub fn finish(&mut self) -> Result<Candidate<T>> {
        let partial = self.candidates.iter().any(|c| c.abv.pending() > 0);
        if partial {
            for c in &mut self.candidates {
                c.abv.flush();
            }
            self.select(1);
        }
        self.best_candidate().cloned()
    }

    pub fn into_best(self) -> Result<Candidate<T>> {
        let idx = {
            let best = self.best_candidate()?;
            self.candidates
                .iter()
                .position(|c| c.id == best.id)
                .expect("present")
        };
        Ok(self.candidates.into_iter().nth(idx).expect("present"))
    }
}

/// Writes `block,candidate,tau,abv,selected`, one row per candidate per block.
pub fn write_tuning_csv<T: Scalar, W: Write>(log: &[TuningRecord<T>], mut out: W) -> Result<()> {
    out.write_all(b"block,candidate,tau,abv,selected\n")?;
    for r in log {
        writeln!(
            out,
            "{},{},{:e},{:e},{}",
            r.block,
            r.candidate,
            r.tau,
            r.abv,
            u8::from(r.selected)
        )?;
    }
    out.flush()?;
    Ok(())
}
