use proptest::prelude::*;
use sourceaware_nn::{softmax, Graph, ParamStore, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::from_vec(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_and_layer_norm_rows(x in matrix(3, 5)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(x);
        let s = g.softmax_rows(v);
        for row in g.value(s).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let n = g.layer_norm_rows(v, 1e-5);
        for row in g.value(n).data().chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_against_naive(a in matrix(3, 4), b in matrix(4, 2)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.matmul(va, vb);
        let got = g.value(c).data().to_vec();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
                prop_assert!((got[i * 2 + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax(z in proptest::collection::vec(-20.0f64..20.0, 2..6), pick in 0usize..6) {
        let label = pick % z.len();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::from_vec(&[1, z.len()], z.clone()).unwrap());
        let l = g.cross_entropy(v, label);
        let want = -softmax(&z)[label].ln();
        prop_assert!((g.scalar(l) - want).abs() < 1e-9 * want.abs().max(1.0));
    }
}
