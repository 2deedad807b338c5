use std::collections::BTreeMap;

use log::warn;

use super::{AgentError, AgentTranscript, Agents};
use crate::corpus::{PairRecord, SlideRecord, Stage, StageMeta};
use crate::extraction::{CandidateEntry, CandidateSet};
use crate::par::{self, Exec};

/// An entry that could not be turned into a pair.
#[derive(Debug)]
pub struct EntryFailure {
    pub patch_id: String,
    pub error: AgentError,
}

#[derive(Debug, Default)]
pub struct SlideOutput {
    pub pairs: Vec<PairRecord>,
    pub failures: Vec<EntryFailure>,
}

pub fn orchestrate_slide(agents: &Agents, cand: &CandidateSet, slide: &SlideRecord) -> Result<SlideOutput, AgentError> {
    orchestrate_slide_with(agents, cand, slide, Exec::default())
}

/// Run describe, revise and summarize for every candidate. Entries whose stages
/// fail are logged and left out. A backend outage aborts the slide.
pub fn orchestrate_slide_with(
    agents: &Agents,
    cand: &CandidateSet,
    slide: &SlideRecord,
    exec: Exec,
) -> Result<SlideOutput, AgentError> {
    if !cand.deduped {
        return Err(AgentError::InvalidInput(format!("candidate set {} has not been deduplicated", cand.slide_id)));
    }
    let results = par::map_slice(exec, &cand.entries, |e| run_entry(agents, e, slide));
    let mut out = SlideOutput::default();
    for (entry, res) in cand.entries.iter().zip(results) {
        match res {
            Ok((pair, log)) => {
                agents.record(log);
                out.pairs.push(pair);
            }
            Err(error) if error.is_outage() => return Err(error),
            Err(error) => {
                warn!("slide {} patch {}: dropped: {error}", slide.slide_id, entry.patch.patch_id);
                out.failures.push(EntryFailure { patch_id: entry.patch.patch_id.clone(), error });
            }
        }
    }
    Ok(out)
}

fn run_entry(
    agents: &Agents,
    entry: &CandidateEntry,
    slide: &SlideRecord,
) -> Result<(PairRecord, Vec<AgentTranscript>), AgentError> {
    let budget = agents.settings().token_budget;
    let described = agents.describe(&entry.patch, &slide.organ_source)?;
    let revised = agents.revise(&described.value)?;
    let summary = agents.summarize(&revised.value.0, budget)?;
    let meta = |t: &AgentTranscript, truncated| StageMeta { backend: t.backend.clone(), attempts: t.attempts, truncated };
    let mut agent_meta = BTreeMap::new();
    agent_meta.insert(Stage::Describe, meta(&described.transcript, false));
    agent_meta.insert(Stage::Revise, meta(&revised.transcript, false));
    agent_meta.insert(Stage::Summarize, meta(&summary.transcript, summary.value.truncated));
    let pair = PairRecord {
        patch: entry.patch.clone(),
        selection_route: entry.route,
        description: described.value,
        revised: revised.value.0,
        summary: summary.value.text,
        summary_tokens: summary.value.tokens,
        agent_meta,
    };
    Ok((pair, vec![described.transcript, revised.transcript, summary.transcript]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentSettings, FaultyBackend, MockBackend, RetryPolicy};
    use crate::corpus::{PatchRef, SelectionRoute};
    use std::sync::Arc;

    fn slide() -> SlideRecord {
        SlideRecord {
            slide_id: "s1".into(),
            organ_source: "colon".into(),
            grid_w: 32,
            grid_h: 32,
            tile_px: 256,
            findings: vec![],
            report_raw: None,
        }
    }

    fn cand(n: usize) -> CandidateSet {
        CandidateSet {
            slide_id: "s1".into(),
            entries: (0..n)
                .map(|i| CandidateEntry {
                    index: i,
                    patch: PatchRef::new("s1", (i % 32) as u32, (i / 32) as u32),
                    route: SelectionRoute::Cluster,
                    best_score: 0.0,
                })
                .collect(),
            deduped: true,
            decisions: vec![],
        }
    }

    #[test]
    fn mock_run_completes_every_entry() {
        let a = Agents::mock(1);
        let out = orchestrate_slide(&a, &cand(384), &slide()).unwrap();
        assert_eq!(out.pairs.len(), 384);
        assert!(out.failures.is_empty());
        for p in &out.pairs {
            p.check_complete(77).unwrap();
        }
        assert_eq!(a.take_transcripts().len(), 384 * 3);
    }

    #[test]
    fn fault_injection_census() {
        let faulty = FaultyBackend::new(MockBackend::with_seed(1), 0.05, 3);
        let c = cand(1000);
        let expected_failures = c.entries.iter().filter(|e| faulty.fails(&e.patch.patch_id)).count();
        assert!(expected_failures > 20);
        let settings = AgentSettings { retry: RetryPolicy::immediate(3), ..AgentSettings::default() };
        let a = Agents::new(Arc::new(faulty), settings);
        let out = orchestrate_slide(&a, &c, &slide()).unwrap();
        assert_eq!(out.failures.len(), expected_failures);
        assert_eq!(out.pairs.len(), 1000 - expected_failures);
    }

    #[test]
    fn empty_candidates_make_no_calls() {
        let a = Agents::mock(1);
        let out = orchestrate_slide(&a, &cand(0), &slide()).unwrap();
        assert!(out.pairs.is_empty());
        assert!(a.take_transcripts().is_empty());
    }

    #[test]
    fn outage_is_fatal() {
        let settings = AgentSettings { retry: RetryPolicy::immediate(1), ..AgentSettings::default() };
        let a = Agents::new(Arc::new(FaultyBackend::down(MockBackend::with_seed(0))), settings);
        assert!(orchestrate_slide(&a, &cand(3), &slide()).unwrap_err().is_outage());
    }

    #[test]
    fn requires_dedup() {
        let mut c = cand(1);
        c.deduped = false;
        assert!(orchestrate_slide(&Agents::mock(0), &c, &slide()).is_err());
    }

    #[test]
    fn exec_modes_agree() {
        let a = Agents::mock(2);
        let x = orchestrate_slide_with(&a, &cand(50), &slide(), Exec::Sequential).unwrap();
        let t1 = a.take_transcripts();
        let y = orchestrate_slide_with(&a, &cand(50), &slide(), Exec::Parallel).unwrap();
        assert_eq!(x.pairs, y.pairs);
        assert_eq!(t1, a.take_transcripts());
    }
}
