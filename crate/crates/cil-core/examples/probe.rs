use cil_core::harness::checkpoint::load_model;
use cil_core::harness::config::ExperimentConfig;
use cil_core::harness::synthetic::{choose_pairs, make_synthetic_stream};
use cil_core::inference::{predict_from_outputs, stage_outputs, StrategyKind};
use cil_core::tensor::Tensor;
use std::collections::BTreeSet;
use std::path::Path;

fn main() {
    let cfg = ExperimentConfig::default();
    let path = std::env::args().nth(1).expect("usage: probe <model.ckpt>");
    let state = load_model(Path::new(&path)).unwrap();
    let partition = cfg.protocol.split_classes().unwrap();
    let stream = make_synthetic_stream(&cfg.synthetic, &partition).unwrap();
    let pairs = choose_pairs(cfg.synthetic.confusable_pairs, &partition).unwrap();
    let pair_classes: BTreeSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    println!("pairs: {pairs:?}");

    let test = stream.test_up_to(stream.num_tasks());
    let outputs = stage_outputs(&state, &test, 64).unwrap();
    let n = test.len();

    let strategies = StrategyKind::ALL;
    let mut correct: Vec<Vec<bool>> = vec![Vec::with_capacity(n); strategies.len()];
    let mut selected_task: Vec<usize> = Vec::with_capacity(n);
    for row in 0..n {
        for (si, &s) in strategies.iter().enumerate() {
            let p = predict_from_outputs(&outputs, &state.classifier, s, row).unwrap();
            correct[si].push(p.class_id == test[row].class_id);
            if si == 0 {
                let sel = p
                    .per_adapter_entropy
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                selected_task.push(sel + 1);
            }
        }
    }

    let true_task: Vec<usize> = test
        .iter()
        .map(|i| state.classifier.task_of_column(state.classifier.column_of(i.class_id).unwrap()))
        .collect();

    for (si, &s) in strategies.iter().enumerate() {
        let total = correct[si].iter().filter(|&&c| c).count() as f64 / n as f64;
        let (mut pc, mut pn, mut cc, mut cn) = (0, 0, 0, 0);
        for (i, inst) in test.iter().enumerate() {
            if pair_classes.contains(&inst.class_id) {
                pn += 1;
                if correct[si][i] {
                    pc += 1;
                }
            } else {
                cn += 1;
                if correct[si][i] {
                    cc += 1;
                }
            }
        }
        println!(
            "{s:<15} acc {total:.4}  pair-class acc {:.4} ({pn})  other acc {:.4} ({cn})",
            pc as f64 / pn as f64,
            cc as f64 / cn as f64
        );
    }

    let routed_ok = selected_task.iter().zip(&true_task).filter(|(a, b)| a == b).count();
    println!("selection accuracy: {:.4}", routed_ok as f64 / n as f64);

    // Pair separability: nearest-class-mean on embeddings, per feature map.
    let train_all: Vec<_> = stream.tasks.iter().flat_map(|t| t.train.clone()).collect();
    for (pa, pb) in &pairs {
        let mut line = format!("pair ({pa},{pb}) NCM acc:");
        let maps: Vec<(String, Option<&cil_core::model::AdapterSet>)> = std::iter::once(("raw".to_string(), None))
            .chain(state.task_adapters.iter().enumerate().map(|(i, a)| (format!("A{}", i + 1), Some(a))))
            .chain(state.universal.iter().map(|u| ("uni".to_string(), Some(u))))
            .collect();
        for (name, ad) in maps {
            let embed = |cls: usize, set: &[cil_core::harness::dataset::Instance]| -> Vec<Vec<f64>> {
                set.iter()
                    .filter(|i| i.class_id == cls)
                    .map(|i| {
                        let tok = Tensor::matrix(cfg.synthetic.seq_len, cfg.synthetic.token_dim, i.tokens.clone());
                        state.backbone.forward_batch(&tok, ad).data_vec()
                    })
                    .collect()
            };
            let mean = |v: &[Vec<f64>]| -> Vec<f64> {
                let d = v[0].len();
                let mut m = vec![0.0; d];
                for row in v {
                    for j in 0..d {
                        m[j] += row[j];
                    }
                }
                m.iter().map(|x| x / v.len() as f64).collect()
            };
            let ma = mean(&embed(*pa, &train_all));
            let mb = mean(&embed(*pb, &train_all));
            let dist = |x: &Vec<f64>, m: &[f64]| -> f64 {
                x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let mut ok = 0usize;
            let mut tot = 0usize;
            for inst in test.iter().filter(|i| i.class_id == *pa || i.class_id == *pb) {
                let tok = Tensor::matrix(cfg.synthetic.seq_len, cfg.synthetic.token_dim, inst.tokens.clone());
                let f = state.backbone.forward_batch(&tok, ad);
                let f = f.data_vec();
                let guess = if dist(&f, &ma) <= dist(&f, &mb) { *pa } else { *pb };
                ok += (guess == inst.class_id) as usize;
                tot += 1;
            }
            line.push_str(&format!(" {name} {:.3}", ok as f64 / tot as f64));
        }
        println!("{line}");
    }

    let t = state.task_adapters.len();
    println!("mean entropy matrix (row = data task, col = adapter; * = row min):");
    for data_task in 1..=t {
        let rows: Vec<usize> = (0..n).filter(|&i| true_task[i] == data_task).collect();
        let mut means = Vec::with_capacity(t);
        for a in 0..t {
            let mut sum = 0.0;
            for &i in &rows {
                let p = predict_from_outputs(&outputs, &state.classifier, StrategyKind::Ensemble, i)
                    .unwrap();
                sum += p.per_adapter_entropy[a];
            }
            means.push(sum / rows.len() as f64);
        }
        let min = means
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let cells: Vec<String> = means
            .iter()
            .enumerate()
            .map(|(a, m)| format!("{m:.4}{}", if a == min { "*" } else { " " }))
            .collect();
        let own = if min + 1 == data_task { "ok" } else { "VIOLATION" };
        println!("  task {data_task}: {}  [{own}]", cells.join(" "));
    }

    let idx = |k: StrategyKind| strategies.iter().position(|&s| s == k).unwrap();
    let ent = idx(StrategyKind::EntropyOnly);
    let uni = idx(StrategyKind::UniversalOnly);
    let ens = idx(StrategyKind::Ensemble);
    let ml = idx(StrategyKind::MaxLogit);

    let count = |f: &dyn Fn(usize) -> bool| (0..n).filter(|&i| f(i)).count();
    println!(
        "entropy wrong: {} of which universal right: {}",
        count(&|i| !correct[ent][i]),
        count(&|i| !correct[ent][i] && correct[uni][i])
    );
    println!(
        "ensemble gains over entropy: {}  losses: {}",
        count(&|i| correct[ens][i] && !correct[ent][i]),
        count(&|i| !correct[ens][i] && correct[ent][i])
    );
    println!(
        "ensemble gains over maxlogit: {}  losses: {}",
        count(&|i| correct[ens][i] && !correct[ml][i]),
        count(&|i| !correct[ens][i] && correct[ml][i])
    );
    println!(
        "misrouted instances: {}  entropy acc there: {:.4}  universal acc there: {:.4}  ensemble acc there: {:.4}",
        count(&|i| selected_task[i] != true_task[i]),
        count(&|i| selected_task[i] != true_task[i] && correct[ent][i]) as f64
            / count(&|i| selected_task[i] != true_task[i]) as f64,
        count(&|i| selected_task[i] != true_task[i] && correct[uni][i]) as f64
            / count(&|i| selected_task[i] != true_task[i]) as f64,
        count(&|i| selected_task[i] != true_task[i] && correct[ens][i]) as f64
            / count(&|i| selected_task[i] != true_task[i]) as f64,
    );

    let flat = |a: &cil_core::model::AdapterSet| -> Vec<f64> {
        let mut v = Vec::new();
        for b in 0..a.num_blocks() {
            v.extend(a.w_down[b].data_vec());
            v.extend(a.w_up[b].data_vec());
        }
        v
    };
    let vecs: Vec<Vec<f64>> = state.task_adapters.iter().map(|a| flat(a)).collect();
    let vuni = flat(state.universal.as_ref().unwrap());
    let dim = vuni.len();
    let mut conflicts = 0usize;
    for j in 0..dim {
        let pos = vecs.iter().any(|v| v[j] > 0.0);
        let neg = vecs.iter().any(|v| v[j] < 0.0);
        if pos && neg {
            conflicts += 1;
        }
    }
    println!("fusion entries: {dim}  sign conflicts: {conflicts} ({:.1}%)", 100.0 * conflicts as f64 / dim as f64);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for (i, v) in vecs.iter().enumerate() {
        let wins = (0..dim).filter(|&j| v[j] != 0.0 && v[j] == vuni[j]).count();
        println!(
            "  task {}: |v| {:.3}  cos(v, uni) {:.3}  winner share {:.3}",
            i + 1,
            norm(v),
            dot(v, &vuni) / (norm(v) * norm(&vuni)).max(1e-12),
            wins as f64 / dim as f64
        );
    }

    for (b, task) in stream.tasks.iter().enumerate() {
        let sample: Vec<_> = task.test.iter().take(40).cloned().collect();
        let tok = Tensor::matrix(
            sample.len() * cfg.backbone.seq_len,
            cfg.backbone.token_dim,
            sample.iter().flat_map(|i| i.tokens.iter().copied()).collect(),
        );
        let own = state.backbone.forward_batch(&tok, state.task_adapters.get(b));
        let fused = state.backbone.forward_batch(&tok, state.universal.as_ref());
        let (od, fd) = (own.data_vec(), fused.data_vec());
        let d = cfg.backbone.embed_dim;
        let mut cos_sum = 0.0;
        for r in 0..sample.len() {
            let a = &od[r * d..(r + 1) * d];
            let c = &fd[r * d..(r + 1) * d];
            cos_sum += dot(a, c) / (norm(a) * norm(c)).max(1e-12);
        }
        println!("  task {} data: cos(own feat, uni feat) {:.3}", b + 1, cos_sum / sample.len() as f64);
    }
}
