//! Client and server state and the per-round protocol.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ledger::{ledger_charge, CommLedger};
use super::{
    aggregate_weighted_mean, apply_amplitudes, select_participants, update_full, update_mix,
    Aggregate, RatioTable, StrategyConfig, StrategyKind,
};
use crate::binary_net::{ForwardMode, Model, TrainConfig};
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::mlpu::{virtual_m, Estimator, EstimatorMode, EstimatorStats};

/// Everything that shapes a federated run apart from model and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Fraction `λ` of clients uploading each round.
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default = "one_usize")]
    pub local_epochs: usize,
    #[serde(default)]
    pub estimator: EstimatorMode,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl FederationConfig {
    pub fn new(strategy: StrategyConfig, seed: u64) -> Self {
        Self {
            strategy,
            train: TrainConfig::default(),
            participation: 1.0,
            local_epochs: 1,
            estimator: EstimatorMode::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.train.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation λ = {} must lie in (0, 1]",
                self.participation
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One client: its model and its shard of the training set.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub model: Model<f32>,
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
}

impl ClientState {
    pub fn shard_size(&self) -> usize {
        self.labels.len()
    }
}

/// Server-side state carried between rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    /// Index of the last completed round (0 before the first).
    pub round: usize,
    pub participation: f64,
    /// Last broadcast weight aggregate.
    pub aggregate: Option<Aggregate>,
    /// Last broadcast layer amplitudes.
    pub amplitudes: Vec<f32>,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub strategy: StrategyKind,
    /// Mean over clients of the held-out accuracy of their models.
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// At a change of forward mode: the accuracy right after the switch,
    /// before local training.
    pub switch_accuracy: Option<f64>,
    pub train_loss: f64,
    pub participants: usize,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub uplink_bits_cum: u64,
    pub downlink_bits_cum: u64,
}

/// A simulated federation.
pub struct Federation {
    cfg: FederationConfig,
    clients: Vec<ClientState>,
    server: ServerState,
    test: Dataset,
    estimator: Estimator,
    ledger: CommLedger,
}

impl Federation {
    /// Gives every client a copy of `template` (identical initial
    /// parameters) and its shard of `train`. Client `i` shuffles with the
    /// stream `i + 1` of a generator seeded by `cfg.seed`.
    pub fn new(
        template: &Model<f32>,
        train: &Dataset,
        partition: &Partition,
        test: Dataset,
        cfg: FederationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition.samples != train.len() {
            return Err(Error::Config(format!(
                "partition covers {} samples, training set has {}",
                partition.samples,
                train.len()
            )));
        }
        partition.validate()?;
        if template.input_len() != train.feature_len() || template.input_len() != test.feature_len()
        {
            return Err(Error::Shape(format!(
                "model expects {} features, data has {} (train) / {} (test)",
                template.input_len(),
                train.feature_len(),
                test.feature_len()
            )));
        }
        if template.num_classes() < train.num_classes {
            return Err(Error::Shape(format!(
                "model has {} outputs for {} classes",
                template.num_classes(),
                train.num_classes
            )));
        }
        let mode = if cfg.strategy.kind_at(1).binary_forward() {
            ForwardMode::Binary
        } else {
            ForwardMode::Real
        };
        let mut clients = Vec::with_capacity(partition.num_clients());
        for (id, shard) in partition.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Config(format!("client {id} has an empty shard")));
            }
            let mut model = template.clone();
            model.set_mode(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64 + 1);
            model.set_rng(rng);
            let local = train.select(shard)?;
            clients.push(ClientState {
                id,
                model,
                features: local.images,
                labels: local.labels,
            });
        }
        let mut server_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        server_rng.set_stream(0);
        let amplitudes = template.weight_layers().map(|w| w.amplitude()).collect();
        Ok(Self {
            estimator: Estimator::new(cfg.estimator),
            server: ServerState {
                round: 0,
                participation: cfg.participation,
                aggregate: None,
                amplitudes,
                rng: server_rng,
            },
            cfg,
            clients,
            test,
            ledger: CommLedger::default(),
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn estimator_stats(&self) -> EstimatorStats {
        self.estimator.stats()
    }

    /// Runs the next round.
    pub fn run_round(&mut self) -> Result<RoundResult> {
        let t = self.server.round + 1;
        let kind = self.cfg.strategy.kind_at(t);
        let mode = if kind.binary_forward() {
            ForwardMode::Binary
        } else {
            ForwardMode::Real
        };
        // At a hybrid switch the local auxiliary weights become the real
        // parameters exchanged from now on.
        let mut switched = false;
        for c in &mut self.clients {
            if c.model.mode() != mode {
                c.model.set_mode(mode);
                switched = true;
            }
        }
        let switch_accuracy = if switched {
            Some(self.evaluate()?.1)
        } else {
            None
        };

        // 1. Local training.
        let cfg = &self.cfg;
        let losses: Vec<f64> = self
            .clients
            .par_iter_mut()
            .map(|c| {
                let mut loss = 0.0;
                for e in 0..cfg.local_epochs {
                    let epoch = (t - 1) * cfg.local_epochs + e;
                    loss = c
                        .model
                        .train_epoch(c.features.view(), &c.labels, epoch, &cfg.train)?;
                }
                Ok(loss)
            })
            .collect::<Result<_>>()?;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        // 2. Upload.
        let participants = select_participants(
            self.clients.len(),
            self.cfg.participation,
            &mut self.server.rng,
        )?;
        let sizes: Vec<usize> = participants
            .iter()
            .map(|&i| self.clients[i].shard_size())
            .collect();
        let equal = sizes.iter().all(|&s| s == sizes[0]);
        let uploaders: Vec<&Model<f32>> = participants
            .iter()
            .map(|&i| &self.clients[i].model)
            .collect();

        // 3. Aggregate, in ascending client order.
        let n_layers = self.clients[0].model.num_weight_layers();
        let mut amplitudes = Vec::with_capacity(n_layers);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let picked: Vec<_> = uploaders
                .iter()
                .map(|m| m.weight_layers().nth(l).expect("layer count is uniform"))
                .collect();
            let amp: Vec<Array2<f32>> = picked
                .iter()
                .map(|w| Array2::from_elem((1, 1), w.amplitude()))
                .collect();
            let amp_refs: Vec<&Array2<f32>> = amp.iter().collect();
            amplitudes.push(aggregate_weighted_mean(&amp_refs, &sizes)?[[0, 0]] as f32);
            let ups: Vec<&Array2<f32>> = picked
                .iter()
                .map(|w| {
                    if kind.uploads_binary() {
                        w.bin()
                    } else {
                        w.aux()
                    }
                })
                .collect();
            if kind.uploads_binary() && equal {
                let mut counts = Array2::<u32>::zeros(ups[0].dim());
                for u in &ups {
                    ndarray::Zip::from(&mut counts)
                        .and(*u)
                        .for_each(|k, &b| *k += (b > 0.0) as u32);
                }
                layers.push(LayerAgg::Counts(counts));
            } else {
                layers.push(LayerAgg::Mean(
                    aggregate_weighted_mean(&ups, &sizes)?.mapv(|v| v as f32),
                ));
            }
        }
        let voters = participants.len() as u32;
        let aggregate =
            if layers.iter().all(|l| matches!(l, LayerAgg::Counts(_))) && !layers.is_empty() {
                Aggregate::Lattice {
                    voters,
                    counts: layers
                        .into_iter()
                        .map(|l| match l {
                            LayerAgg::Counts(c) => c,
                            LayerAgg::Mean(_) => unreachable!(),
                        })
                        .collect(),
                }
            } else {
                let real: Vec<Array2<f32>> = layers
                    .into_iter()
                    .map(|l| match l {
                        LayerAgg::Mean(m) => m,
                        LayerAgg::Counts(_) => unreachable!(),
                    })
                    .collect();
                Aggregate::Real(real)
            };
        let aggregate = if kind == StrategyKind::UpDown {
            Aggregate::Sign(
                (0..aggregate.num_layers())
                    .map(|l| aggregate.sign(l))
                    .collect(),
            )
        } else {
            aggregate
        };

        // 4. Download and local update on every client.
        let part_total: usize = sizes.iter().sum();
        let mut is_participant = vec![false; self.clients.len()];
        for &i in &participants {
            is_participant[i] = true;
        }
        match kind {
            StrategyKind::FaReal | StrategyKind::Full => {
                let weights: Vec<Array2<f32>> = (0..n_layers)
                    .map(|l| aggregate.mean(l).mapv(|v| v as f32))
                    .collect();
                self.clients
                    .par_iter_mut()
                    .try_for_each(|c| update_full(&mut c.model, &weights, &amplitudes))?;
            }
            StrategyKind::UpOnly | StrategyKind::UpDown => {
                let beta = self.cfg.strategy.beta.expect("validated");
                self.clients.par_iter_mut().try_for_each(|c| {
                    update_mix(&mut c.model, &aggregate, beta)?;
                    apply_amplitudes(&mut c.model, &amplitudes)
                })?;
            }
            StrategyKind::BiMl => {
                let alpha = self.cfg.strategy.alpha.expect("validated");
                // Clients whose virtual count differs from the voter count
                // (unequal shards, or a non-uploader with a different shard
                // size) read the real-valued mean instead of the lattice.
                let real_view = match &aggregate {
                    Aggregate::Lattice { .. } => Aggregate::Real(
                        (0..n_layers)
                            .map(|l| aggregate.mean(l).mapv(|v| v as f32))
                            .collect(),
                    ),
                    other => other.clone(),
                };
                let mut tables: Vec<((u64, bool, bool), RatioTable)> = Vec::new();
                let mut plan = Vec::with_capacity(self.clients.len());
                for c in &self.clients {
                    let own = is_participant[c.id];
                    let m = if own {
                        virtual_m(part_total, c.shard_size())?
                    } else {
                        part_total as f64 / c.shard_size() as f64
                    };
                    let lattice =
                        matches!(aggregate, Aggregate::Lattice { .. }) && m == f64::from(voters);
                    let key = (m.to_bits(), own, lattice);
                    let idx = match tables.iter().position(|(k, _)| *k == key) {
                        Some(i) => i,
                        None => {
                            let src = if lattice { &aggregate } else { &real_view };
                            tables
                                .push((key, RatioTable::build(&mut self.estimator, src, m, own)?));
                            tables.len() - 1
                        }
                    };
                    plan.push((idx, lattice));
                }
                let (tables, aggregate, real_view) = (&tables, &aggregate, &real_view);
                self.clients
                    .par_iter_mut()
                    .zip(plan.par_iter())
                    .try_for_each(|(c, &(i, lattice))| {
                        let src = if lattice { aggregate } else { real_view };
                        tables[i].1.apply(&mut c.model, src, alpha)?;
                        apply_amplitudes(&mut c.model, &amplitudes)
                    })?;
            }
        }

        // 5. Accounting.
        let charge = ledger_charge(
            kind,
            self.clients[0].model.num_weights() as u64,
            n_layers as u64,
            participants.len() as u64,
            equal,
        );
        let row = self
            .ledger
            .record(t, kind, participants.len() as u64, charge)
            .clone();
        self.server.round = t;
        self.server.aggregate = Some(aggregate);
        self.server.amplitudes = amplitudes;

        // 6. Held-out evaluation of every client model.
        let (test_loss, test_accuracy) = self.evaluate()?;
        Ok(RoundResult {
            round: t,
            strategy: kind,
            test_loss,
            test_accuracy,
            switch_accuracy,
            train_loss,
            participants: participants.len(),
            uplink_bits: row.uplink_bits,
            downlink_bits: row.downlink_bits,
            uplink_bits_cum: row.uplink_bits_cum,
            downlink_bits_cum: row.downlink_bits_cum,
        })
    }

    /// Mean held-out `(loss, accuracy)` over all client models.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let test = &self.test;
        let evals: Vec<(f64, f64)> = self
            .clients
            .par_iter()
            .map(|c| c.model.evaluate(test.images.view(), &test.labels))
            .collect::<Result<_>>()?;
        let k = evals.len() as f64;
        Ok((
            evals.iter().map(|e| e.0).sum::<f64>() / k,
            evals.iter().map(|e| e.1).sum::<f64>() / k,
        ))
    }

    /// Runs `rounds` rounds and returns their results.
    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundResult>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }
}

enum LayerAgg {
    Counts(Array2<u32>),
    Mean(Array2<f32>),
}
