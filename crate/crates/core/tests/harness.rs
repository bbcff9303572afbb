use survcl::data::TaskStream;
use survcl::experiment::task_folds;
use survcl::harness::{evaluate, run_sequence, Method, MethodConfig, MetricSummary, PerformanceMatrix, Trainer};
use survcl::model::ModelConfig;
use survcl::synth::{generate_stream, Fold, GeneratorConfig};
use survcl::Error;

fn stream(n_tasks: usize, seed: u64) -> (TaskStream, Vec<Fold>) {
    let s = generate_stream(&GeneratorConfig {
        n_tasks,
        cases_per_task: 50,
        seed,
        ..Default::default()
    })
    .unwrap()
    .stream;
    let folds = task_folds(&s, 5, 0, seed).unwrap();
    (s, folds)
}

fn config(method: Method, epochs: usize) -> MethodConfig {
    let mut c = MethodConfig::new(method);
    c.epochs = epochs;
    c.seed = 5;
    c.model = ModelConfig {
        latent_dim: 16,
        hidden_dim: 24,
        attn_dim: 8,
        use_moe: c.model.use_moe,
        ..Default::default()
    };
    c
}

#[test]
fn one_task_has_only_an_average() {
    let (s, f) = stream(1, 1);
    let r = run_sequence(&config(Method::Consurv, 2), &s, &f).unwrap();
    assert_eq!(r.c_index.rows.len(), 2);
    let m = MetricSummary::from_matrix(&r.c_index).unwrap();
    assert_eq!(m.average, r.c_index.rows[1][0].unwrap());
    assert_eq!((m.forgetting, m.bwt, m.fwt), (None, None, None));
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let (s, f) = stream(1, 2);
    let mut t = Trainer::new(config(Method::Er, 0), s.patch_dim(), s.genomic_width()).unwrap();
    t.model.ensure_task(0).unwrap();
    let before = t.model.store.clone();
    let out = t.train_task(&s.tasks[0], 0, &f[0]).unwrap();
    assert_eq!(out.best_epoch, None);
    assert_eq!(t.model.store, before);
}

#[test]
fn single_epoch_checkpoint_is_that_epoch() {
    let (s, f) = stream(1, 3);
    let mut t = Trainer::new(config(Method::Finetune, 1), s.patch_dim(), s.genomic_width()).unwrap();
    let out = t.train_task(&s.tasks[0], 0, &f[0]).unwrap();
    assert_eq!(out.best_epoch, Some(0));
    let val = evaluate(&t.model, &s.tasks[0], &f[0].val, 0).unwrap().c_index;
    assert_eq!(Some(val), out.best_val);
}

#[test]
fn same_seed_same_results() {
    let (s, f) = stream(2, 4);
    for m in [Method::Consurv, Method::DerPp] {
        let a = run_sequence(&config(m, 2), &s, &f).unwrap();
        let b = run_sequence(&config(m, 2), &s, &f).unwrap();
        assert_eq!(a.c_index, b.c_index);
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.routing, b.routing);
    }
}

#[test]
fn rows_fill_in_order_and_entries_are_fractions() {
    let (s, f) = stream(3, 5);
    let r = run_sequence(&config(Method::Er, 1), &s, &f).unwrap();
    for row in &r.c_index.rows {
        assert!(row.iter().all(|v| v.is_some_and(|x| (0.0..=1.0).contains(&x))));
    }
    assert_eq!(r.curve.len(), 3);
    assert_eq!(r.buffer.as_ref().unwrap().len(), 32);
    assert!(r.routing.is_empty());
}

#[test]
fn joint_fills_a_single_training_row() {
    let (s, f) = stream(2, 6);
    let r = run_sequence(&config(Method::Joint, 1), &s, &f).unwrap();
    assert!(r.c_index.rows[1].iter().all(Option::is_none));
    assert!(r.c_index.rows[2].iter().all(Option::is_some));
    let m = MetricSummary::from_matrix(&r.c_index).unwrap();
    assert_eq!((m.forgetting, m.bwt, m.fwt), (None, None, None));
}

#[test]
fn evaluation_only_uses_the_tasks_own_head() {
    let (s, f) = stream(2, 7);
    let r = run_sequence(&config(Method::Consurv, 1), &s, &f).unwrap();
    let before = evaluate(&r.model, &s.tasks[0], &f[0].val, 0).unwrap();
    let mut m = r.model.clone();
    let head = m.backbone.heads[&1].clone();
    m.store.value_mut(head.w).data_mut().fill(3.0);
    let moe = m.moe.clone().unwrap();
    for site in [&moe.patch, &moe.genomic, &moe.fusion] {
        let router = site.routers[&1].clone();
        m.store.value_mut(router.w).data_mut().fill(-2.0);
    }
    assert_eq!(evaluate(&m, &s.tasks[0], &f[0].val, 0).unwrap(), before);
}

#[test]
fn routing_covers_every_site_and_task() {
    let (s, f) = stream(2, 8);
    let r = run_sequence(&config(Method::Consurv, 1), &s, &f).unwrap();
    assert_eq!(r.routing.len(), 2 * 3 * 8);
    for rec in r.routing.iter().filter(|x| x.expert == 7) {
        assert_eq!(rec.proportion, 1.0);
    }
    for task in 0..2 {
        let total: f64 = r.routing.iter().filter(|x| x.task == task).map(|x| x.proportion).sum();
        assert!((total - 9.0).abs() < 1e-12);
    }
}

#[test]
fn mismatched_splits_are_rejected() {
    let (s, f) = stream(2, 9);
    let e = run_sequence(&config(Method::Finetune, 1), &s, &f[..1]).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
    let empty = vec![
        Fold {
            train: vec![],
            val: f[0].val.clone(),
        },
        f[1].clone(),
    ];
    assert!(matches!(run_sequence(&config(Method::Finetune, 1), &s, &empty), Err(Error::Data(_))));
}

#[test]
fn transfer_metric_examples() {
    let r = PerformanceMatrix::from_rows("c_index", vec![vec![0.5, 0.5], vec![0.6, 0.55], vec![0.5, 0.5]]).unwrap();
    assert!((r.forgetting().unwrap() - 0.1).abs() < 1e-12);
    assert!((r.bwt().unwrap() + 0.1).abs() < 1e-12);
    assert!((r.fwt().unwrap() - 0.05).abs() < 1e-12);
    let worse = PerformanceMatrix::from_rows("c_index", vec![vec![0.6, 0.6], vec![0.6, 0.5], vec![0.6, 0.5]]).unwrap();
    assert!(worse.fwt().unwrap() < 0.0);
    let better = PerformanceMatrix::from_rows("c_index", vec![vec![0.5, 0.5], vec![0.6, 0.5], vec![0.7, 0.6]]).unwrap();
    assert!(better.bwt().unwrap() > 0.0);
    assert_eq!(better.forgetting().unwrap(), 0.0);
}
