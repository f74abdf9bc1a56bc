use drtl_core::relation::*;
use drtl_core::rng;
use drtl_core::scenes::generate_scenes;
use drtl_core::synth::{synthesize_pairs, synthesize_pseudo_target, DistortionKind};
use nalgebra::DMatrix;
use rand::Rng as _;

type M = Vec<Vec<f64>>;

fn rand_m(r: &mut rng::Rng, n: usize, m: usize, s: f64) -> M {
    (0..n).map(|_| (0..m).map(|_| r.gen_range(-s..s)).collect()).collect()
}

fn to_d(m: &M) -> DMatrix<f64> {
    DMatrix::from_fn(m.len(), m[0].len(), |i, j| m[i][j])
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn matmul(a: &M, b: &M) -> M {
    (0..a.len())
        .map(|i| (0..b[0].len()).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

/// Embedding of one feature, written out step by step.
fn oracle(f: &[f64], h: &M, w: f64, b: f64, wg: &M) -> (Vec<f64>, M, M, Vec<f64>) {
    let q = h.len();
    let a_p = softmax(&h.iter().map(|hq| -w * sq(f, hq) + b).collect::<Vec<_>>());
    let a_m: M = (0..q)
        .map(|m| softmax(&(0..q).map(|n| -w * sq(&h[m], &h[n]) + b).collect::<Vec<_>>()))
        .collect();
    let mut a = vec![vec![0.0; q + 1]; q + 1];
    for i in 0..=q {
        a[i][i] = 1.0;
    }
    for i in 0..q {
        a[0][i + 1] += a_p[i];
        a[i + 1][0] += a_p[i];
        for j in 0..q {
            a[i + 1][j + 1] += (a_m[i][j] + a_m[j][i]) / 2.0;
        }
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let norm: M = (0..=q)
        .map(|i| (0..=q).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect();
    let mut x = vec![f.to_vec()];
    x.extend(h.iter().cloned());
    let out = matmul(&matmul(&norm, &x), wg);
    let c = out[0].iter().map(|v| v.max(0.0)).collect();
    (a_p, a_m, norm, c)
}

#[test]
fn graph_ops_match_oracle_on_random_instances() {
    let mut r = rng::from_seed(2024);
    for case in 0..100 {
        let q = r.gen_range(2..=8);
        let d = r.gen_range(1..=6);
        let h = rand_m(&mut r, q, d, 1.0);
        let f: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (w, b) = (r.gen_range(0.1..3.0), r.gen_range(-1.0..1.0));
        let wg = rand_m(&mut r, d, d, 1.0);
        let bank = MemoryBank::new(to_d(&h), w, b).unwrap();
        let (a_p, a_m, norm, c) = oracle(&f, &h, w, b, &wg);

        let got_p = compute_projection_adjacency(&f, &bank).unwrap();
        let got_m = compute_memory_adjacency(&bank);
        let got_a = assemble_adjacency(&got_p, &got_m.weights).unwrap();
        let got_c = graph_embed(&f, &bank, &to_d(&wg)).unwrap();
        for i in 0..q {
            assert!((got_p[i] - a_p[i]).abs() < 1e-6, "case {case} A_p");
            for j in 0..q {
                assert!((got_m.weights[(i, j)] - a_m[i][j]).abs() < 1e-6, "case {case} A_M");
                assert!((got_m.logits[(i, j)] - got_m.logits[(j, i)]).abs() < 1e-12);
            }
        }
        for i in 0..=q {
            for j in 0..=q {
                assert!((got_a[(i, j)] - norm[i][j]).abs() < 1e-6, "case {case} A");
            }
        }
        for k in 0..d {
            assert!((got_c[k] - c[k]).abs() < 1e-6, "case {case} c");
        }
    }
}

#[test]
fn projection_and_memory_examples() {
    let h = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
    let bank = MemoryBank::new(h, 1.0, 0.0).unwrap();
    let a_p = compute_projection_adjacency(&[0.0, 0.0], &bank).unwrap();
    assert!((a_p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(a_p[0] > a_p[1] && a_p[1] > a_p[2]);
    let m = compute_memory_adjacency(&bank);
    for i in 0..3 {
        let row_max = (0..3).map(|j| m.logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(m.logits[(i, i)], row_max);
    }
    let zero = assemble_adjacency(&[0.0; 3], &DMatrix::zeros(3, 3)).unwrap();
    assert_eq!(zero, DMatrix::identity(4, 4));
    assert!(compute_projection_adjacency(&[0.0], &bank).is_err());
}

#[test]
fn unnormalized_row_sums_count_incident_weights() {
    let mut r = rng::from_seed(8);
    let q = 5;
    let a_p: Vec<f64> = (0..q).map(|_| r.gen::<f64>()).collect();
    let a_m = to_d(&rand_m(&mut r, q, q, 1.0).into_iter().map(|row| row.into_iter().map(f64::abs).collect()).collect());
    let a = adjacency_with_self_loops(&a_p, &a_m).unwrap();
    assert!((a.row(0).sum() - (1.0 + a_p.iter().sum::<f64>())).abs() < 1e-12);
    for i in 0..q {
        let incident = a_p[i] + (0..q).map(|j| 0.5 * (a_m[(i, j)] + a_m[(j, i)])).sum::<f64>();
        assert!((a.row(i + 1).sum() - (1.0 + incident)).abs() < 1e-12);
    }
}

#[test]
fn trained_network_groups_kinds() {
    let clean = generate_scenes(40, 24, 48, 48, 3).unwrap();
    let kinds = [DistortionKind::GaussNoise, DistortionKind::Bicubic8, DistortionKind::GaussBlur];
    let aux: Vec<_> = kinds.iter().map(|&k| synthesize_pairs(&clean, k, 4).unwrap()).collect();
    let cfg = DrnConfig {
        stage_widths: vec![8, 16, 16],
        stage_convs: vec![1, 1, 1],
        d: 16,
        q: 8,
        steps: 300,
        batch: 12,
        patch: 32,
        probe_n: 64,
        eval_patches_per_kind: 16,
        seed: 1,
        ..DrnConfig::default()
    };
    let out = train_drn(&aux, &cfg).unwrap();
    let drn = &out.drn;

    // disjoint halves of one kind agree more than noise and bicubic do
    let noise = &aux[0].items;
    let (a, b) = noise.split_at(noise.len() / 2);
    let ea = embed_distortion("GaussNoise", a, drn, 64, 1).unwrap();
    let eb = embed_distortion("GaussNoise", b, drn, 64, 2).unwrap();
    let bic = embed_distortion("Bicubic8", &aux[1].items, drn, 64, 3).unwrap();
    let within = cosine(&ea.c, &eb.c).unwrap();
    let across = cosine(&ea.c, &bic.c).unwrap();
    assert!(within > across, "within {within} across {across}");

    // heatmap over seven auxiliary kinds and a target
    let mut tasks = Vec::new();
    let mut samples = Vec::new();
    for (i, k) in DistortionKind::ALL.iter().enumerate() {
        let ds = synthesize_pairs(&clean, *k, 4).unwrap();
        let rows = probe_embeddings(&ds.items, drn, 24, i as u64).unwrap();
        tasks.push(DistortionEmbedding { kind: k.name().into(), c: mean_rows(&rows), probe_n: 24 });
        samples.extend(rows.into_iter().map(|r| (k.name().to_string(), r)));
    }
    let target = synthesize_pseudo_target(&clean, "target", 9).unwrap();
    let rows = probe_embeddings(&target.items, drn, 24, 99).unwrap();
    tasks.push(DistortionEmbedding { kind: "target".into(), c: mean_rows(&rows), probe_n: 24 });
    let g = graph_export(&samples, &tasks).unwrap();
    assert_eq!(g.heatmap.len(), 8);
    for i in 0..8 {
        assert_eq!(g.heatmap[i].len(), 8);
        assert!((g.heatmap[i][i] - 1.0).abs() < 1e-12);
        for j in 0..8 {
            assert!((g.heatmap[i][j] - g.heatmap[j][i]).abs() < 1e-12);
        }
    }

    // projected scatter: noise and bicubic samples form separate groups
    let pts: Vec<_> = g.points.iter().filter(|p| p.kind == "GaussNoise" || p.kind == "Bicubic8").collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (i, p) in pts.iter().enumerate() {
        for q in &pts[i + 1..] {
            let dist = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
            if p.kind == q.kind {
                intra += dist;
                ni += 1;
            } else {
                inter += dist;
                nx += 1;
            }
        }
    }
    assert!(intra / (ni as f64) < inter / (nx as f64));
}

#[test]
fn relation_matrix_normalizes_to_mean_one() {
    let e = |k: &str, c: Vec<f64>| DistortionEmbedding { kind: k.into(), c, probe_n: 1 };
    let aux = vec![e("a", vec![1.0, 0.0]), e("b", vec![0.0, 1.0]), e("c", vec![-1.0, 0.0])];
    let rel = relation_matrix(&aux, &e("t", vec![1.0, 0.0]), 0).unwrap();
    assert_eq!(rel.kinds, vec!["a", "b", "c"]);
    assert!((rel.raw[0] - 1.0).abs() < 1e-12 && rel.raw[2] < -0.99);
    let mean = rel.gamma.iter().sum::<f64>() / 3.0;
    assert!((mean - 1.0).abs() < 1e-12);
    assert!(rel.gamma.iter().all(|&g| g >= 0.0));
    // non-positive similarities share the floor
    assert!(rel.gamma[0] > rel.gamma[1]);
    assert_eq!(rel.gamma[1], rel.gamma[2]);
    assert!((rel.gamma[1] / rel.gamma[0] - GAMMA_FLOOR).abs() < 1e-12);
}
