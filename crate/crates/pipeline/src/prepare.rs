use fastweight_core::adapters::ridge_adapter;
use fastweight_core::synthdata::{generate_corpus, partition_tasks, Corpus, EpisodeTask, Partition, PartitionAssignment};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{stage, Result};

/// Generated, partitioned corpus plus the support ridge adapter of every
/// task, which drives the similarity partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub support_adapters: Vec<DVector<f64>>,
    pub assignment: PartitionAssignment,
}

impl Prepared {
    pub fn tasks_in(&self, partitions: &[Partition]) -> Vec<&EpisodeTask> {
        self.corpus.indices_in(partitions).into_iter().map(|i| &self.corpus.tasks[i]).collect()
    }

    pub fn adapters_in(&self, partitions: &[Partition]) -> (Vec<DVector<f64>>, Vec<String>) {
        self.corpus
            .indices_in(partitions)
            .into_iter()
            .map(|i| (self.support_adapters[i].clone(), self.corpus.tasks[i].task_id.clone()))
            .unzip()
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut corpus = stage("generate", generate_corpus(&cfg.generator))?;
    let alpha = cfg.phase1.ridge_alpha;
    let support_adapters = stage(
        "generate",
        corpus
            .tasks
            .par_iter()
            .map(|t| ridge_adapter(t, &corpus.feature_map, alpha))
            .collect::<fastweight_core::Result<Vec<_>>>(),
    )?;
    let assignment = stage("partition", partition_tasks(&support_adapters, &cfg.partition))?;
    stage("partition", corpus.apply_partition(&assignment))?;
    Ok(Prepared {
        corpus,
        support_adapters,
        assignment,
    })
}
