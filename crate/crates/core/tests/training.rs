use histopair::cliptrain::{
    read_checkpoint, retrieval_eval, train_two_stage, write_checkpoint, StageSchedule, TrainStage,
};
use histopair::evaluation::{abmil_train, evaluate_bags, seeded_replicates, AbmilHyper, MilSplit};
use histopair::par::Exec;
use histopair::synth::{CorrelatedTask, SignalBags};

fn schedule(epochs1: usize, epochs2: usize) -> StageSchedule {
    let task = CorrelatedTask::new(32, 0.1, 3);
    StageSchedule {
        stage1: task.sample(200, 1),
        stage2: task.sample(50, 2),
        epochs1,
        epochs2,
        batch_size: 32,
        lr: 0.5,
        momentum: 0.9,
        d_out: 32,
    }
}

#[test]
fn checkpoint_reproduces_retrieval() {
    let run = train_two_stage(&schedule(30, 10), 8).unwrap();
    assert!(run.telemetry.iter().any(|r| r.stage == TrainStage::Stage1));
    assert!(run.telemetry.iter().any(|r| r.stage == TrainStage::Stage2));
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&run.state, dir.path()).unwrap();
    let back = read_checkpoint(dir.path()).unwrap();
    let held = CorrelatedTask::new(32, 0.1, 3).sample(100, 9);
    let a = retrieval_eval(&run.state, &held, 1);
    let b = retrieval_eval(&back, &held, 1);
    assert!((a.image_to_text - b.image_to_text).abs() <= 0.02);
    assert!(a.image_to_text >= 0.9, "{a:?}");
}

#[test]
fn stage_two_continues_stage_one() {
    let only1 = train_two_stage(&schedule(10, 0), 8).unwrap();
    let both = train_two_stage(&schedule(10, 5), 8).unwrap();
    let n1 = only1.telemetry.len();
    assert_eq!(&both.telemetry[..n1], &only1.telemetry[..]);
    assert!(both.state.step > only1.state.step);
}

#[test]
fn mil_replicates_are_reproducible() {
    let task = SignalBags::generate(60, 8, 2);
    let split = MilSplit { train: (0..40).collect(), val: (40..60).collect() };
    let hyper = AbmilHyper { hidden: 16, epochs: 3, ..AbmilHyper::default() };
    let run = |exec| {
        seeded_replicates(3, 1, exec, |s| {
            let (p, _) = abmil_train(&task.bags, &split, &hyper, s)?;
            Ok([("f1".to_string(), evaluate_bags(&p, &task.bags, &split.val).f1)].into())
        })
        .unwrap()
    };
    let a = run(Exec::Parallel);
    let b = run(Exec::Sequential);
    assert_eq!(a.runs, b.runs);
    assert_eq!(a.summary.len(), 1);
}
