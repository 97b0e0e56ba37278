use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neutra::diff::{Tape, Tensor};
use neutra::evaluation::cosine_similarity;
use neutra::layers::{spectral_oracle, ChebConvParams};
use neutra::mesh::{adjacency, build_laplacian, parse_obj, write_obj, GraphTopology, TriMesh};
use neutra::verify::random_connected_graph;

fn graph(seed: u64, max_n: usize) -> GraphTopology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 + (seed as usize % (max_n - 1));
    random_connected_graph(n, 0.3, &mut rng).unwrap()
}

fn cheb(seed: u64, order: usize, fi: usize, fo: usize) -> ChebConvParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    ChebConvParams::new(
        order,
        Tensor::uniform([order * fi, fo], 1.0, &mut rng),
        Tensor::uniform([fo], 1.0, &mut rng),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_quadratic_form_is_edge_energy(seed in any::<u64>(), x in prop::collection::vec(-5.0f64..5.0, 16)) {
        let g = graph(seed, 16);
        let op = build_laplacian(&g).unwrap();
        let x = &x[..g.n()];
        let lx = op.laplacian().matvec(x);
        let q: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        let energy: f64 = g.edges().iter().map(|&(i, j)| (x[i] - x[j]).powi(2)).sum();
        prop_assert!((q - energy).abs() <= 1e-9 * (1.0 + energy));
        prop_assert!(op.laplacian().row_sums().iter().all(|s| s.abs() < 1e-12));
        prop_assert!(op.laplacian().is_symmetric(0.0));
    }

    #[test]
    fn scaled_spectrum_spans_minus_one_to_one(seed in any::<u64>()) {
        let g = graph(seed, 12);
        let op = build_laplacian(&g).unwrap();
        let n = g.n();
        let ev = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &op.scaled().to_dense())).eigenvalues;
        let lo = ev.iter().copied().fold(f64::MAX, f64::min);
        let hi = ev.iter().copied().fold(f64::MIN, f64::max);
        prop_assert!((lo + 1.0).abs() < 1e-9, "min {lo}");
        prop_assert!((hi - 1.0).abs() < 1e-6, "max {hi}");
    }

    #[test]
    fn adjacency_ignores_face_order_and_rotation(seed in any::<u64>()) {
        let mesh = neutra::synthetic::template_mesh(12).unwrap();
        let mut faces = mesh.faces().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        faces.shuffle(&mut rng);
        for (i, f) in faces.iter_mut().enumerate() {
            f.rotate_left(i % 3);
        }
        let shuffled = TriMesh::new(mesh.vertices().to_vec(), faces).unwrap();
        prop_assert_eq!(adjacency(&shuffled), adjacency(&mesh));
    }

    #[test]
    fn cheb_conv_matches_spectral_oracle(seed in any::<u64>(), order in 1usize..=6, fi in 1usize..=4, fo in 1usize..=4) {
        let g = graph(seed, 8);
        let op = build_laplacian(&g).unwrap();
        let p = cheb(seed, order, fi, fo);
        let x = Tensor::uniform([g.n(), fi], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let fast = p.forward(&x, &op).unwrap();
        let slow = spectral_oracle(&x, op.laplacian(), op.e_max(), &p).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) < 1e-10);
    }

    #[test]
    fn cheb_conv_is_affine_in_the_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = graph(seed, 10);
        let op = build_laplacian(&g).unwrap();
        let p = cheb(seed, 4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform([g.n(), 2], 1.0, &mut rng);
        let y = Tensor::uniform([g.n(), 2], 1.0, &mut rng);
        let mix = Tensor::new([g.n(), 2], x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect()).unwrap();
        let zero = Tensor::zeros([g.n(), 2]);
        let (fx, fy, fm, f0) = (p.forward(&x, &op).unwrap(), p.forward(&y, &op).unwrap(), p.forward(&mix, &op).unwrap(), p.forward(&zero, &op).unwrap());
        // f(ax + by) - f(0) = a (f(x) - f(0)) + b (f(y) - f(0))
        for i in 0..fm.len() {
            let lhs = fm.data()[i] - f0.data()[i];
            let rhs = a * (fx.data()[i] - f0.data()[i]) + b * (fy.data()[i] - f0.data()[i]);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn cheb_conv_commutes_with_relabeling(seed in any::<u64>()) {
        let g = graph(seed, 10);
        let n = g.n();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let relabeled = GraphTopology::new(n, g.edges().iter().map(|&(i, j)| (perm[i], perm[j]))).unwrap();
        let (op, op_p) = (build_laplacian(&g).unwrap(), build_laplacian(&relabeled).unwrap());
        prop_assert!((op.e_max() - op_p.e_max()).abs() < 1e-8 * op.e_max());
        let p = cheb(seed, 5, 3, 2);
        let x = Tensor::uniform([n, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let mut xp = vec![0.0; n * 3];
        for v in 0..n {
            xp[perm[v] * 3..perm[v] * 3 + 3].copy_from_slice(&x.data()[v * 3..v * 3 + 3]);
        }
        let y = p.forward(&x, &op).unwrap();
        // evaluate on the relabeled graph with its own e_max replaced by the original
        let op_same = neutra::mesh::GraphOperator::with_e_max(&relabeled, op.e_max()).unwrap();
        let yp = p.forward(&Tensor::new([n, 3], xp).unwrap(), &op_same).unwrap();
        for v in 0..n {
            for k in 0..2 {
                prop_assert!((y.data()[v * 2 + k] - yp.data()[perm[v] * 2 + k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_are_linear_in_the_objective(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform([3, 4], 1.0, &mut rng);
        let w = Tensor::uniform([4, 2], 1.0, &mut rng);
        let grad = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.constant(w.clone());
            let h = t.matmul(xv, wv).unwrap();
            let s = t.sigmoid(h);
            let f = t.square_sum(s);
            let g = t.abs_sum(xv);
            let (fa, gb) = (t.scale(f, ca), t.scale(g, cb));
            let root = t.add(fa, gb).unwrap();
            t.backward(root).unwrap().get_or_zeros(&t, xv)
        };
        let (gf, gg, gm) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..gm.len() {
            prop_assert!((gm.data()[i] - (a * gf.data()[i] + b * gg.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_ignores_positive_scale(v in prop::collection::vec(-10.0f64..10.0, 1..30), u in prop::collection::vec(-10.0f64..10.0, 30), k in 1e-3f64..1e3) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let u = &u[..v.len()];
        prop_assume!(u.iter().any(|x| x.abs() > 1e-6));
        let kv: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!((cosine_similarity(&v, u).unwrap() - cosine_similarity(&kv, u).unwrap()).abs() < 1e-12);
        prop_assert!((cosine_similarity(&v, &kv).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn obj_text_round_trips(seed in any::<u64>()) {
        let mesh = neutra::synthetic::template_mesh(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Tensor::uniform([20, 3], 10.0, &mut rng);
        let moved = mesh.with_vertices(mesh.vertices().iter().zip(jitter.data().chunks(3)).map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect()).unwrap();
        let mut text = Vec::new();
        write_obj(&moved, &mut text).unwrap();
        let back = parse_obj(std::str::from_utf8(&text).unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.faces(), moved.faces());
        let mut again = Vec::new();
        write_obj(&back, &mut again).unwrap();
        prop_assert_eq!(again, text);
    }
}
