use fastweight_core::riskbound::{check_bound, summarize, BoundReport, BoundSummary};
use fastweight_core::synthdata::Partition;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::phase1::Phase1Artifacts;
use crate::prepare::Prepared;
use crate::{stage, Result};

pub const POPULATION_DRAW: usize = 2000;

/// Bound decomposition on every task of the corpus against the frozen
/// memory, with a fresh population sample for the retrieval test tasks.
pub fn run_riskbound(cfg: &RunConfig, prep: &Prepared, p1: &Phase1Artifacts) -> Result<(Vec<BoundReport>, BoundSummary)> {
    let mem = &p1.memory;
    let r_sparse = cfg.phase1.r_sparse.min(mem.k()).min(mem.r());
    let fmap = &prep.corpus.feature_map;
    let reports = (0..prep.corpus.tasks.len())
        .into_par_iter()
        .map(|i| {
            let t = &prep.corpus.tasks[i];
            let population = if t.partition() == Some(Partition::RetTest) {
                Some(prep.corpus.draw_fresh(i, POPULATION_DRAW, 1)?)
            } else {
                None
            };
            check_bound(t, fmap, mem, r_sparse, cfg.phase1.l0_mode, &t.query, population.as_deref())
        })
        .collect::<fastweight_core::Result<Vec<_>>>();
    let reports = stage("riskbound", reports)?;
    let summary = summarize(&reports);
    Ok((reports, summary))
}
