//! Acceptance suite: one test per release gate, each printing a single
//! PASS/FAIL verdict line (run with --nocapture to see them all).

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use xdcnn_core::autodiff::gradcheck::run_suite;
use xdcnn_core::autodiff::{Tape, Tensor};
use xdcnn_core::error::Result;
use xdcnn_core::hsdata::{
    default_synth_spec, load_cube, load_labels, save_cube, save_labels, synth_generate, HyperCube,
    LabelMap, SynthSpec,
};
use xdcnn_core::sampler::{
    apply_d4, augment_d4, extract_patch, load_split, save_split, split_train_test, DomainBatch,
    Patch, Split, D4_TRANSFORMS, DEFAULT_PATCH,
};
use xdcnn_core::traineval::{
    evaluate, export_history, lr_at, train, BatchSource, ScheduleSource, TrainConfig, Trainer,
};
use xdcnn_core::xnet::{load_checkpoint, save_checkpoint, CrossDomainNet, Mode, Partition};

fn verdict(n: usize, label: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {n} ({label}): {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance {n} ({label}) failed: {detail}");
}

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let report = run_suite(0, 5).unwrap();
    let binary = Command::new(env!("CARGO_BIN_EXE_xdcnn"))
        .args(["gradcheck", "--seed", "0"])
        .output()
        .unwrap();
    let elapsed = started.elapsed();

    let mut worst_plain = 0f64;
    let mut worst_bn_train = 0f64;
    for g in &report.groups {
        if g.name == "batchnorm_train" {
            worst_bn_train = worst_bn_train.max(g.max_rel_err);
        } else {
            worst_plain = worst_plain.max(g.max_rel_err);
        }
    }
    let pass = report.all_pass()
        && worst_plain < 1e-4
        && worst_bn_train < 1e-3
        && report.n_seeds >= 5
        && binary.status.success()
        && elapsed.as_secs() < 60;
    verdict(
        1,
        "gradient oracle",
        pass,
        &format!(
            "max rel err {worst_plain:.3e} (<1e-4), batchnorm train {worst_bn_train:.3e} (<1e-3), \
             {} seeds, cli exit {:?}, {:.1}s",
            report.n_seeds,
            binary.status.code(),
            elapsed.as_secs_f64()
        ),
    );
}

struct Replicate<'a> {
    inner: ScheduleSource<'a>,
    n: usize,
}

impl BatchSource for Replicate<'_> {
    fn domains(&self) -> usize {
        self.n
    }

    fn next(&mut self) -> Result<Vec<DomainBatch>> {
        let base = self.inner.next()?;
        let b = &base[0];
        Ok((0..self.n)
            .map(|d| DomainBatch {
                domain_id: d,
                data: b.data.clone(),
                labels: b.labels.clone(),
            })
            .collect())
    }
}

#[test]
fn criterion_2_shared_lr_equivalence() {
    let started = Instant::now();
    let spec = SynthSpec {
        n_domains: 1,
        latent_dim: 8,
        bands_per_domain: vec![8],
        classes_per_domain: vec![4],
        image_size: (24, 24),
        noise_sigma: 0.4,
        blob_count: 16,
        seed: 20,
    };
    let (cube, labels, dspec) = synth_generate(&spec).unwrap().pop().unwrap();
    let split = split_train_test(&labels, &dspec.class_names, 10, 1).unwrap();
    let splits = [split];

    let mut net1 = CrossDomainNet::build_with_width(std::slice::from_ref(&dspec), 16, 7).unwrap();
    let mut specs3 = Vec::new();
    for d in 0..3 {
        let mut s = dspec.clone();
        s.name = format!("clone{d}");
        specs3.push(s);
    }
    let mut net3 = CrossDomainNet::build_with_width(&specs3, 16, 999).unwrap();
    for d in 0..3 {
        net3.fronts[d] = net1.fronts[0].clone();
        net3.heads[d] = net1.heads[0].clone();
    }
    net3.trunk = net1.trunk.clone();

    let cfg = TrainConfig {
        iterations: 100,
        lr_step: 40,
        seed: 5,
        ..TrainConfig::default()
    };
    let src1 = ScheduleSource::new(vec![&cube], &splits, cfg.batch_size, cfg.seed).unwrap();
    let src3 = Replicate {
        inner: ScheduleSource::new(vec![&cube], &splits, cfg.batch_size, cfg.seed).unwrap(),
        n: 3,
    };
    let mut t1 = Trainer::new(&mut net1, src1, cfg.clone()).unwrap();
    let mut t3 = Trainer::new(&mut net3, src3, cfg).unwrap();

    let mut worst_rel = 0f64;
    let mut bitwise = true;
    for _ in 0..100 {
        t1.step().unwrap();
        t3.step().unwrap();
        let a = t1.net().params(Partition::Shared);
        let b = t3.net().params(Partition::Shared);
        for ((_, ta, _), (_, tb, _)) in a.iter().zip(&b) {
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                if x.to_bits() != y.to_bits() {
                    bitwise = false;
                }
                let rel = (x as f64 - y as f64).abs() / (x.abs() as f64).max(y.abs() as f64).max(1e-30);
                worst_rel = worst_rel.max(rel);
            }
        }
        if worst_rel > 1e-6 {
            break;
        }
    }
    let elapsed = started.elapsed();
    let pass = worst_rel <= 1e-6 && elapsed.as_secs() < 60;
    verdict(
        2,
        "1/N shared-lr equivalence",
        pass,
        &format!(
            "trunk max rel diff {worst_rel:.3e} over 100 iterations (<=1e-6, bitwise: {bitwise}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_schedule_reproduction() {
    let cfg = TrainConfig::default();
    let points = [(0usize, 1e-3f64), (40_000, 1e-4), (80_000, 1e-5)];
    let mut pass = true;
    for &(iter, want) in &points {
        let (base, shared) = lr_at(&cfg, iter, 3);
        if base != want || shared != want / 3.0 {
            pass = false;
        }
    }
    verdict(
        3,
        "schedule reproduction",
        pass,
        "base lr exactly 1e-3 / 1e-4 / 1e-5 at iterations 0 / 40000 / 80000, shared = base/3",
    );
}

#[test]
fn criterion_4_augmentation() {
    // orbit size and bitwise involutions on a real patch
    let spec = SynthSpec {
        n_domains: 1,
        latent_dim: 8,
        bands_per_domain: vec![5],
        classes_per_domain: vec![3],
        image_size: (16, 16),
        noise_sigma: 0.5,
        blob_count: 9,
        seed: 4,
    };
    let (cube, _, _) = synth_generate(&spec).unwrap().pop().unwrap();
    let patch = Patch {
        data: extract_patch(&cube, 7, 8, DEFAULT_PATCH).unwrap(),
        label: 1,
        domain_id: 0,
    };
    let orbit = augment_d4(&patch).unwrap();
    let mut pass = orbit.len() == D4_TRANSFORMS && D4_TRANSFORMS == 8;
    let mut distinct = std::collections::HashSet::new();
    for p in &orbit {
        distinct.insert(p.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    pass &= distinct.len() == 8;
    // reflections (and the half turn) undo themselves bitwise
    for t in [2usize, 4, 5, 6, 7] {
        let twice = apply_d4(&apply_d4(&patch.data, t).unwrap(), t).unwrap();
        for (&a, &b) in patch.data.data().iter().zip(twice.data()) {
            pass &= a.to_bits() == b.to_bits();
        }
    }

    // 200-per-class splits over the benchmark class populations
    let cases: [(usize, usize, &[usize], usize, usize); 3] = [
        (145, 145, &[1228, 630, 283, 278, 772, 2255, 393, 1065], 1600, 6904),
        (
            512,
            217,
            &[
                1809, 3526, 1776, 1194, 2478, 3759, 3379, 11071, 6003, 3078, 868, 1727, 716, 870,
                7068, 1607,
            ],
            3200,
            50929,
        ),
        (610, 340, &[6431, 18449, 1899, 2864, 1145, 4829, 1130, 3482, 747], 1800, 40976),
    ];
    let mut totals = Vec::new();
    for (w, h, test_counts, want_train, want_test) in cases {
        let mut labels = vec![0u16; w * h];
        let mut i = 0;
        for (k, &n) in test_counts.iter().enumerate() {
            for _ in 0..n + 200 {
                labels[i] = k as u16 + 1;
                i += 1;
            }
        }
        let labels = LabelMap::new(w, h, labels).unwrap();
        let names: Vec<String> = (1..=test_counts.len()).map(|k| format!("c{k}")).collect();
        let split = split_train_test(&labels, &names, 200, 9).unwrap();
        pass &= split.train_total() == want_train && split.test_total() == want_test;
        totals.push(8 * split.train_total());
    }
    verdict(
        4,
        "eight-fold augmentation",
        pass,
        &format!(
            "orbit 8/8 distinct, involutions bitwise, split totals 1600/3200/1800 train and \
             6904/50929/40976 test, augmented pools {totals:?}"
        ),
    );
}

fn synth_domains(spec: &SynthSpec, per_class: usize, split_seed: u64) -> (Vec<HyperCube>, Vec<Split>, Vec<xdcnn_core::hsdata::DomainSpec>) {
    let mut cubes = Vec::new();
    let mut splits = Vec::new();
    let mut specs = Vec::new();
    for (cube, labels, dspec) in synth_generate(spec).unwrap() {
        splits.push(split_train_test(&labels, &dspec.class_names, per_class, split_seed).unwrap());
        cubes.push(cube);
        specs.push(dspec);
    }
    (cubes, splits, specs)
}

/// Split with train and test swapped, for measuring training accuracy.
fn flipped(split: &Split) -> Split {
    let mut f = split.clone();
    for c in &mut f.classes {
        std::mem::swap(&mut c.train, &mut c.test);
    }
    f
}

#[test]
fn criterion_5_overfit_check() {
    let started = Instant::now();
    let spec = default_synth_spec(50);
    let (cubes, splits, specs) = synth_domains(&spec, 8, 51);
    let mut net = CrossDomainNet::build_with_width(&specs, 32, 52).unwrap();
    let cfg = TrainConfig {
        iterations: 2000,
        lr_step: 2000,
        seed: 53,
        ..TrainConfig::default()
    };
    let refs: Vec<&HyperCube> = cubes.iter().collect();
    train(&mut net, &refs, &splits, &cfg).unwrap();

    let mut accs = Vec::new();
    let mut pass = true;
    for d in 0..3 {
        let report = evaluate(&net, d, &cubes[d], &flipped(&splits[d])).unwrap();
        pass &= report.overall_accuracy == 1.0;
        accs.push(report.overall_accuracy);
    }
    let elapsed = started.elapsed();
    pass &= elapsed.as_secs() < 300;
    verdict(
        5,
        "overfit check",
        pass,
        &format!(
            "training accuracy {accs:?} after 2000 iterations at quarter width, {:.0}s (<300s, one core)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_cross_domain_gain() {
    const WIDTH: usize = 32;
    const ITERS: usize = 400;
    const SEEDS: u64 = 5;
    let started = Instant::now();
    let mut gains = Vec::new();
    for seed in 0..SEEDS {
        let spec = default_synth_spec(seed);
        let (cubes, splits, specs) = synth_domains(&spec, 20, seed + 100);
        let cfg = TrainConfig {
            iterations: ITERS,
            lr_step: ITERS / 2,
            seed: seed + 200,
            ..TrainConfig::default()
        };

        let mut cross = CrossDomainNet::build_with_width(&specs, WIDTH, seed + 300).unwrap();
        let refs: Vec<&HyperCube> = cubes.iter().collect();
        train(&mut cross, &refs, &splits, &cfg).unwrap();
        let cross_oa: f64 = (0..3)
            .map(|d| evaluate(&cross, d, &cubes[d], &splits[d]).unwrap().overall_accuracy)
            .sum::<f64>()
            / 3.0;

        let mut ind_oa = 0.0;
        for d in 0..3 {
            let mut solo =
                CrossDomainNet::build_with_width(std::slice::from_ref(&specs[d]), WIDTH, seed + 300)
                    .unwrap();
            train(
                &mut solo,
                &[&cubes[d]],
                std::slice::from_ref(&splits[d]),
                &cfg,
            )
            .unwrap();
            ind_oa += evaluate(&solo, 0, &cubes[d], &splits[d]).unwrap().overall_accuracy / 3.0;
        }
        let gain = cross_oa - ind_oa;
        println!(
            "  seed {seed}: cross {cross_oa:.3}, individual {ind_oa:.3}, gain {gain:+.3}"
        );
        gains.push(gain);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let elapsed = started.elapsed();
    verdict(
        6,
        "cross-domain gain",
        mean > 0.0,
        &format!(
            "mean gain {mean:+.4} over {SEEDS} seeds (strictly positive required), \
             per-seed {:?}, {:.0}s",
            gains.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let spec = SynthSpec {
        n_domains: 2,
        latent_dim: 8,
        bands_per_domain: vec![6, 5],
        classes_per_domain: vec![3, 3],
        image_size: (24, 24),
        noise_sigma: 0.4,
        blob_count: 12,
        seed: 70,
    };
    let run = |dir: &Path| {
        let (cubes, splits, specs) = synth_domains(&spec, 10, 71);
        let mut net = CrossDomainNet::build_with_width(&specs, 16, 72).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            lr_step: 250,
            seed: 73,
            ..TrainConfig::default()
        };
        let refs: Vec<&HyperCube> = cubes.iter().collect();
        let history = train(&mut net, &refs, &splits, &cfg).unwrap();
        save_checkpoint(&net, &dir.join("net.xdnc")).unwrap();
        export_history(&history, &dir.join("loss.csv")).unwrap();
        for d in 0..2 {
            let report = evaluate(&net, d, &cubes[d], &splits[d]).unwrap();
            fs::write(
                dir.join(format!("oa{d}.txt")),
                format!("{:.17}\n", report.overall_accuracy),
            )
            .unwrap();
        }
        (net, cubes, splits, specs)
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (net, cubes, splits, specs) = run(dir_a.path());
    run(dir_b.path());
    let mut pass = true;
    for name in ["net.xdnc", "loss.csv", "oa0.txt", "oa1.txt"] {
        pass &= fs::read(dir_a.path().join(name)).unwrap() == fs::read(dir_b.path().join(name)).unwrap();
    }

    // checkpoint round trip preserves forward outputs bitwise
    let reloaded = load_checkpoint(&dir_a.path().join("net.xdnc")).unwrap();
    let patch = extract_patch(&cubes[0], 10, 10, DEFAULT_PATCH).unwrap();
    let batch = Tensor::new(
        vec![1, cubes[0].bands(), DEFAULT_PATCH, DEFAULT_PATCH],
        patch.data().to_vec(),
    )
    .unwrap();
    let before = net.forward(0, &batch, Mode::Eval).unwrap();
    let after = reloaded.forward(0, &batch, Mode::Eval).unwrap();
    pass &= before
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // cube, label, and split files round-trip bitwise
    let dir = dir_a.path();
    let (labels, _, _) = {
        let gen = synth_generate(&spec).unwrap();
        let (_, l, s) = gen.into_iter().next().unwrap();
        (l, s, ())
    };
    save_cube(&cubes[0], &dir.join("a.cube.json")).unwrap();
    let c2 = load_cube(&dir.join("a.cube.json")).unwrap();
    save_cube(&c2, &dir.join("b.cube.json")).unwrap();
    pass &= fs::read(dir.join("a.cube.raw")).unwrap() == fs::read(dir.join("b.cube.raw")).unwrap();

    save_labels(&labels, &specs[0].class_names, &dir.join("a.labels.json")).unwrap();
    let (l2, n2) = load_labels(&dir.join("a.labels.json")).unwrap();
    save_labels(&l2, &n2, &dir.join("b.labels.json")).unwrap();
    pass &= fs::read(dir.join("a.labels.raw")).unwrap() == fs::read(dir.join("b.labels.raw")).unwrap();

    save_split(&splits[0], &dir.join("a.split.json")).unwrap();
    let s2 = load_split(&dir.join("a.split.json"), &specs[0].class_names).unwrap();
    save_split(&s2, &dir.join("b.split.json")).unwrap();
    pass &= fs::read(dir.join("a.split.json")).unwrap() == fs::read(dir.join("b.split.json")).unwrap();
    pass &= s2 == splits[0];

    verdict(
        7,
        "determinism and persistence",
        pass,
        "two pipeline runs byte-identical; checkpoint, cube, label, and split round trips bitwise",
    );
}

#[test]
fn criterion_8_sharing_semantics() {
    let spec = SynthSpec {
        n_domains: 3,
        latent_dim: 8,
        bands_per_domain: vec![6, 5, 4],
        classes_per_domain: vec![3, 4, 3],
        image_size: (16, 16),
        noise_sigma: 0.4,
        blob_count: 9,
        seed: 80,
    };
    let (cubes, splits, specs) = synth_domains(&spec, 6, 81);
    let mut net = CrossDomainNet::build_with_width(&specs, 8, 82).unwrap();

    let batches: Vec<Tensor<f32>> = (0..3)
        .map(|d| {
            let (x, y, _) = splits[d].train_pixels()[0];
            let p = extract_patch(&cubes[d], x, y, DEFAULT_PATCH).unwrap();
            Tensor::new(
                vec![1, cubes[d].bands(), DEFAULT_PATCH, DEFAULT_PATCH],
                p.data().to_vec(),
            )
            .unwrap()
        })
        .collect();
    let logits =
        |net: &CrossDomainNet, d: usize| net.forward(d, &batches[d], Mode::Eval).unwrap().data().to_vec();
    let base: Vec<Vec<f32>> = (0..3).map(|d| logits(&net, d)).collect();

    let mut pass = true;
    // flood one tensor with a large value, run the closure, restore
    let perturbed = |net: &mut CrossDomainNet,
                         part: Partition,
                         name: &str,
                         check: &mut dyn FnMut(&CrossDomainNet) -> bool| {
        let saved = {
            let mut params = net.params_mut(part);
            let (_, t, _) = params.iter_mut().find(|(n, _, _)| n == name).unwrap();
            let saved = t.data().to_vec();
            t.data_mut().fill(2.0);
            saved
        };
        let ok = check(net);
        let mut params = net.params_mut(part);
        let (_, t, _) = params.iter_mut().find(|(n, _, _)| n == name).unwrap();
        t.data_mut().copy_from_slice(&saved);
        ok
    };
    // any trunk tensor reaches every domain
    let shared_names: Vec<String> = net.params(Partition::Shared).iter().map(|(n, _, _)| n.clone()).collect();
    for name in &shared_names {
        let ok = perturbed(&mut net, Partition::Shared, name, &mut |net| {
            (0..3).all(|d| logits(net, d) != base[d])
        });
        if !ok {
            eprintln!("trunk tensor {name} failed to reach every domain");
        }
        pass &= ok;
    }
    // any per-domain tensor stays inside its own stream
    for d in 0..3 {
        let names: Vec<String> = net
            .params(Partition::Domain(d))
            .iter()
            .map(|(n, _, _)| n.clone())
            .collect();
        for name in &names {
            let ok = perturbed(&mut net, Partition::Domain(d), name, &mut |net| {
                logits(net, d) != base[d]
                    && (0..3).filter(|&o| o != d).all(|o| logits(net, o) == base[o])
            });
            if !ok {
                eprintln!("domain {d} tensor {name} leaked or had no effect");
            }
            pass &= ok;
        }
    }

    // cross-domain gradients are identically zero: domain j's loss graph
    // contains no other domain's parameters at all
    for (j, batch) in batches.iter().enumerate() {
        let mut tape = Tape::new();
        let graph = net
            .forward_graph(&mut tape, j, batch, Mode::Train)
            .unwrap();
        let loss = tape.softmax_xent(graph.logits, &[0]).unwrap();
        tape.backward(loss).unwrap();
        for i in 0..3 {
            if i == j {
                continue;
            }
            for (name, _, _) in net.params(Partition::Domain(i)) {
                pass &= !graph.params.iter().any(|(n, _)| *n == name);
            }
        }
        // and every present parameter's gradient exists
        for (_, vid) in &graph.params {
            pass &= tape.grad(*vid).is_ok();
        }
    }
    verdict(
        8,
        "sharing semantics",
        pass,
        "trunk perturbations reach all domains; head perturbations stay local; \
         cross-domain front/head gradients identically zero",
    );
}
