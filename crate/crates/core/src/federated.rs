//! In-process FedAvg simulation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{ImageSet, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ParameterSet};
use crate::training::{derive_seed, evaluate_split, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Whole subjects go to a single client.
    BySubject,
}

/// Splits the items of `data` (all splits) across `n_clients`. Returns item
/// indices per client, each sorted.
pub fn partition_clients(data: &ImageSet, n_clients: usize, mode: PartitionMode, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_clients < 2 {
        return Err(Error::domain(format!(
            "partitioning needs at least 2 clients, got {n_clients}"
        )));
    }
    if data.items.is_empty() {
        return Err(Error::domain("cannot partition an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::new(); n_clients];
    match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..data.items.len()).collect();
            idx.shuffle(&mut rng);
            for (k, i) in idx.into_iter().enumerate() {
                parts[k % n_clients].push(i);
            }
        }
        PartitionMode::BySubject => {
            let mut subjects: Vec<usize> = data.items.iter().map(|i| i.label).collect();
            subjects.sort_unstable();
            subjects.dedup();
            if n_clients > subjects.len() {
                return Err(Error::domain(format!(
                    "{n_clients} clients but only {} subjects",
                    subjects.len()
                )));
            }
            subjects.shuffle(&mut rng);
            let mut owner = vec![0usize; data.classes.len()];
            for (k, &s) in subjects.iter().enumerate() {
                owner[s] = k % n_clients;
            }
            for (i, item) in data.items.iter().enumerate() {
                parts[owner[item.label]].push(i);
            }
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// A client's private data and identity. The orchestrator hands this to
/// [`client_update`] but only ever receives a [`ClientUpdate`] back.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub data: ImageSet,
    /// Local training items.
    pub n_samples: usize,
}

impl ClientState {
    pub fn new(client_id: usize, data: ImageSet) -> Self {
        let n_samples = data.count(Split::Train);
        Self {
            client_id,
            data,
            n_samples,
        }
    }
}

/// What leaves a client: parameters and a sample count, never samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterSet,
    pub n_samples: usize,
}

/// Seed of one client's local training in one round.
pub fn round_seed(base: u64, round: usize, client_id: usize) -> u64 {
    derive_seed(base, &[round as u64, client_id as u64])
}

/// Local training from the broadcast parameters.
pub fn client_update(
    global: &ParameterSet,
    client: &ClientState,
    local_epochs: usize,
    train_config: &TrainConfig,
    model: &ModelConfig,
    round: usize,
) -> Result<ClientUpdate> {
    let config = TrainConfig {
        epochs: local_epochs,
        seed: round_seed(train_config.seed, round, client.client_id),
        ..train_config.clone()
    };
    let params = if local_epochs == 0 || client.n_samples == 0 {
        global.clone()
    } else {
        train(&config, model, &client.data, Some(global.clone()))?.last
    };
    global.check_structure(&params)?;
    Ok(ClientUpdate {
        client_id: client.client_id,
        params,
        n_samples: client.n_samples,
    })
}

/// Sample-weighted mean of the client parameters, accumulated in client-id
/// order as `t₀ + Σₖ wₖ·(tₖ − t₀)`, which leaves a singleton or a list of
/// identical updates exactly unchanged.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let first = *order
        .first()
        .ok_or_else(|| Error::domain("no client updates to aggregate"))?;
    let total: usize = order.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::domain("client updates carry no samples"));
    }
    for u in &order[1..] {
        if u.params.fingerprint != first.params.fingerprint {
            return Err(Error::domain(format!(
                "client {} trained a different model configuration",
                u.client_id
            )));
        }
        if u.params.len() != first.params.len() {
            return Err(Error::domain(format!(
                "client {} sent {} tensors, expected {}",
                u.client_id,
                u.params.len(),
                first.params.len()
            )));
        }
        for ((na, ta), (nb, tb)) in first.params.iter().zip(u.params.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::domain(format!(
                    "client {} tensor {nb} {:?} does not match {na} {:?}",
                    u.client_id,
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
    }
    let mut out = first.params.clone();
    for u in &order[1..] {
        let w = u.n_samples as f64 / total as f64;
        for i in 0..out.len() {
            let anchor = first.params.tensor(i).data();
            let theirs = u.params.tensor(i).data();
            for ((o, a), t) in out.tensor_mut(i).data_mut().iter_mut().zip(anchor).zip(theirs) {
                *o += w * (t - a);
            }
        }
    }
    Ok(out)
}

pub fn aggregation_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let total: usize = order.iter().map(|u| u.n_samples).sum();
    order.iter().map(|u| u.n_samples as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub partition: PartitionMode,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_clients: 3,
            rounds: 10,
            local_epochs: 1,
            partition: PartitionMode::BySubject,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Each client's locally trained model on its own validation items.
    pub client_val_accuracy: Vec<Option<f64>>,
    pub client_samples: Vec<usize>,
    pub weights: Vec<f64>,
    /// Broadcast model on the global validation split.
    pub global_val_accuracy_before: f64,
    pub global_val_accuracy_after: f64,
    pub global_val_loss_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub global: ParameterSet,
    pub rounds: Vec<RoundRecord>,
    pub partitions: Vec<Vec<usize>>,
}

fn subset(data: &ImageSet, idx: &[usize]) -> ImageSet {
    ImageSet {
        size: data.size,
        classes: data.classes.clone(),
        items: idx.iter().map(|&i| data.items[i].clone()).collect(),
    }
}

const EVAL_CHUNK: usize = 64;

/// Broadcast → concurrent local training → aggregation → global evaluation,
/// `rounds` times. With one client the whole dataset stays on that client.
pub fn run_rounds(
    config: &FedConfig,
    train_config: &TrainConfig,
    model: &ModelConfig,
    data: &ImageSet,
    init: Option<ParameterSet>,
) -> Result<FedOutcome> {
    if config.n_clients == 0 {
        return Err(Error::Config("n_clients must be positive".into()));
    }
    let partitions = if config.n_clients == 1 {
        vec![(0..data.items.len()).collect()]
    } else {
        partition_clients(data, config.n_clients, config.partition, config.seed)?
    };
    let clients: Vec<ClientState> = partitions
        .iter()
        .enumerate()
        .map(|(k, p)| ClientState::new(k, subset(data, p)))
        .collect();
    let mut global = match init {
        Some(p) => p,
        None => build_model(model, train_config.seed)?,
    };
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let (_, before) = evaluate_split(&global, model, data, Split::Val, EVAL_CHUNK)?;
        let results: Vec<Result<(ClientUpdate, Option<f64>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .iter()
                .map(|c| {
                    let global = &global;
                    s.spawn(move || {
                        let u = client_update(global, c, config.local_epochs, train_config, model, round)?;
                        let acc = if c.data.count(Split::Val) > 0 {
                            Some(evaluate_split(&u.params, model, &c.data, Split::Val, EVAL_CHUNK)?.1)
                        } else {
                            None
                        };
                        Ok((u, acc))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        let mut updates = Vec::with_capacity(clients.len());
        let mut client_acc = Vec::with_capacity(clients.len());
        for r in results {
            let (u, a) = r?;
            updates.push(u);
            client_acc.push(a);
        }
        global = fedavg_aggregate(&updates)?;
        if !global.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Numeric(format!(
                "aggregated parameters are not finite in round {round}"
            )));
        }
        let (loss_after, after) = evaluate_split(&global, model, data, Split::Val, EVAL_CHUNK)?;
        rounds.push(RoundRecord {
            round,
            client_val_accuracy: client_acc,
            client_samples: updates.iter().map(|u| u.n_samples).collect(),
            weights: aggregation_weights(&updates),
            global_val_accuracy_before: before,
            global_val_accuracy_after: after,
            global_val_loss_after: loss_after,
        });
    }
    Ok(FedOutcome {
        global,
        rounds,
        partitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::LabeledImage;
    use crate::numerics::Tensor;

    fn one(v: f64) -> ParameterSet {
        ParameterSet::new(vec![("w".into(), Tensor::from_vec(vec![v]))], 7).unwrap()
    }

    fn upd(id: usize, v: f64, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: one(v),
            n_samples: n,
        }
    }

    #[test]
    fn weighted_mean_micro_case() {
        let a = fedavg_aggregate(&[upd(0, 2.0, 1), upd(1, 4.0, 3)]).unwrap();
        assert_eq!(a.tensor(0).data(), &[3.5]);
        let scaled = fedavg_aggregate(&[upd(0, 2.0, 10), upd(1, 4.0, 30)]).unwrap();
        assert_eq!(a, scaled);
        let swapped = fedavg_aggregate(&[upd(1, 4.0, 3), upd(0, 2.0, 1)]).unwrap();
        assert_eq!(a, swapped);
    }

    #[test]
    fn singleton_and_identical_updates_are_fixed_points() {
        let x = 0.1 + 0.2;
        assert_eq!(fedavg_aggregate(&[upd(4, x, 17)]).unwrap(), one(x));
        let same = fedavg_aggregate(&[upd(0, x, 3), upd(1, x, 5), upd(2, x, 11)]).unwrap();
        assert_eq!(same, one(x));
        let w = aggregation_weights(&[upd(0, x, 3), upd(1, x, 5), upd(2, x, 11)]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_update_names_client_and_tensor() {
        let bad = ClientUpdate {
            client_id: 3,
            params: ParameterSet::new(vec![("w".into(), Tensor::from_vec(vec![1.0, 2.0]))], 7).unwrap(),
            n_samples: 1,
        };
        let err = fedavg_aggregate(&[upd(0, 1.0, 1), bad]).unwrap_err().to_string();
        assert!(err.contains("client 3") && err.contains('w'), "{err}");
        assert!(fedavg_aggregate(&[]).is_err());
    }

    fn labelled(labels: &[usize]) -> ImageSet {
        ImageSet {
            size: 1,
            classes: (0..=*labels.iter().max().unwrap()).map(|i| i.to_string()).collect(),
            items: labels
                .iter()
                .map(|&l| LabeledImage {
                    pixels: Tensor::zeros(vec![3, 1, 1]),
                    label: l,
                    split: Split::Train,
                })
                .collect(),
        }
    }

    #[test]
    fn by_subject_partition_counts() {
        let labels: Vec<usize> = (0..9).flat_map(|s| [s; 4]).collect();
        let set = labelled(&labels);
        let parts = partition_clients(&set, 3, PartitionMode::BySubject, 5).unwrap();
        for p in &parts {
            let mut subj: Vec<usize> = p.iter().map(|&i| labels[i]).collect();
            subj.dedup();
            assert_eq!(subj.len(), 3);
        }
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..36).collect::<Vec<_>>());
        assert!(partition_clients(&set, 10, PartitionMode::BySubject, 5).is_err());
        assert_eq!(
            partition_clients(&set, 3, PartitionMode::Iid, 2).unwrap(),
            partition_clients(&set, 3, PartitionMode::Iid, 2).unwrap()
        );
        assert!(partition_clients(&set, 1, PartitionMode::Iid, 2).is_err());
    }
}
