use negotiated::data::{sample_indices, RawDataset};
use negotiated::negotiation::{
    blend, AnchorMode, LabelMatrix, LabelStore, NegotiationConfig, NegotiationSchedule,
};
use negotiated::tensor::{conv2d_forward, matmul, Conv2dParams, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CASES: u32 = 1000;

fn simplex_rows(rows: usize, classes: usize) -> impl Strategy<Value = LabelMatrix<f64>> {
    prop::collection::vec(0.0f64..1.0, rows * classes).prop_filter_map("degenerate row", move |raw| {
        let mut data = raw;
        for row in data.chunks_mut(classes) {
            let s: f64 = row.iter().sum();
            if s < 1e-3 {
                return None;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        LabelMatrix::new(Tensor::new(&[rows, classes], data).unwrap()).ok()
    })
}

fn pair() -> impl Strategy<Value = (LabelMatrix<f64>, LabelMatrix<f64>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(r, k)| (simplex_rows(r, k), simplex_rows(r, k)))
}

fn one_hot(rows: usize, classes: usize) -> impl Strategy<Value = LabelMatrix<f64>> {
    prop::collection::vec(0..classes, rows).prop_map(move |l| LabelMatrix::one_hot(&l, classes).unwrap())
}

fn assert_rows_on_simplex(m: &LabelMatrix<f64>) {
    for i in 0..m.rows() {
        let row = m.row(i);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)), "row {i}: {row:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn blend_stays_on_simplex((a, b) in pair(), n in 0.0f64..=1.0) {
        assert_rows_on_simplex(&blend(&a, &b, n).unwrap());
    }

    #[test]
    fn blend_endpoint_identities((a, b) in pair()) {
        prop_assert_eq!(blend(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(blend(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn blend_is_affine_in_rate((a, b) in pair(), n in 0.0f64..=1.0) {
        let out = blend(&a, &b, n).unwrap();
        for ((o, x), y) in out.as_tensor().data().iter().zip(a.as_tensor().data()).zip(b.as_tensor().data()) {
            let expected = if n == 0.0 { *x } else if n == 1.0 { *y } else { x + n * (y - x) };
            prop_assert_eq!(o.to_bits(), expected.to_bits());
        }
    }

    /// Phase counts for rates on a 1/100 grid, counted in integers.
    #[test]
    fn phase_count_matches_integer_arithmetic(start in 0u32..100, step in 1u32..60, cap in 1u32..=100) {
        let cfg = NegotiationConfig {
            initial_rate: f64::from(start) / 100.0,
            increment: f64::from(step) / 100.0,
            max_rate: f64::from(cap) / 100.0,
            anchor: AnchorMode::Previous,
        };
        let expected = if start > cap { 0 } else { (cap - start) / step + 1 } as usize;
        let mut sched = NegotiationSchedule::new(cfg).unwrap();
        let mut store = LabelStore::new(LabelMatrix::<f64>::one_hot(&[0, 1], 2).unwrap(), AnchorMode::Previous);
        let preds = LabelMatrix::uniform(2, 2);
        let mut rates = Vec::new();
        while sched.is_active() {
            rates.push(store.negotiate_with(&preds, &mut sched).unwrap());
            prop_assert!(rates.len() <= 101);
        }
        prop_assert_eq!(rates.len(), expected);
        for (k, r) in rates.iter().enumerate() {
            prop_assert!((r - f64::from(start + k as u32 * step) / 100.0).abs() < 1e-12);
        }
        let frozen = sched.rate();
        for _ in 0..3 {
            prop_assert!(store.negotiate_with(&preds, &mut sched).is_err());
            prop_assert_eq!(sched.rate(), frozen);
        }
    }

    #[test]
    fn originals_never_change_and_rows_stay_on_simplex(
        labels in one_hot(6, 4),
        preds in prop::collection::vec(simplex_rows(6, 4), 1..25),
        originals_anchor in any::<bool>(),
    ) {
        let anchor = if originals_anchor { AnchorMode::Originals } else { AnchorMode::Previous };
        let bits: Vec<u64> = labels.as_tensor().data().iter().map(|v| v.to_bits()).collect();
        let mut store = LabelStore::new(labels, anchor);
        let mut sched = NegotiationSchedule::new(NegotiationConfig { anchor, ..Default::default() }).unwrap();
        for p in &preds {
            if !sched.is_active() {
                break;
            }
            store.negotiate_with(p, &mut sched).unwrap();
            assert_rows_on_simplex(store.negotiated());
        }
        let after: Vec<u64> = store.original().as_tensor().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, after);
    }

    #[test]
    fn zero_start_with_large_increment_never_modifies(labels in one_hot(5, 3), preds in simplex_rows(5, 3), step in 1.0001f64..10.0) {
        let mut store = LabelStore::new(labels.clone(), AnchorMode::Previous);
        let cfg = NegotiationConfig { initial_rate: 0.0, increment: step, ..Default::default() };
        let mut sched = NegotiationSchedule::new(cfg).unwrap();
        while sched.is_active() {
            store.negotiate_with(&preds, &mut sched).unwrap();
        }
        prop_assert_eq!(store.negotiated(), &labels);
        prop_assert_eq!(store.label_drift(), 0.0);
    }

    #[test]
    fn identity_matmul_is_exact(m in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        let a = random(&[m, k], seed);
        let eye = |n: usize| Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap();
        prop_assert_eq!(matmul(&eye(m), &a).unwrap(), a.clone());
        prop_assert_eq!(matmul(&a, &eye(k)).unwrap(), a);
    }

    #[test]
    fn identity_conv_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = random(&[2, c, h, w], seed);
        let kernels = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }).unwrap();
        let y = conv2d_forward(&x, &kernels, &Tensor::zeros(&[c]), Conv2dParams::default()).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn subsets_never_repeat(per_class in 1usize..20, classes in 2usize..6, take in 1usize..100, stratified in any::<bool>(), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..per_class * classes).map(|i| (i * 7) % classes).collect();
        let take = take.min(labels.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_indices(&labels, classes, take, stratified, &mut rng) {
            Ok(idx) => {
                prop_assert_eq!(idx.len(), take);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                if stratified {
                    let counts: Vec<usize> = (0..classes)
                        .map(|k| idx.iter().filter(|&&i| labels[i] == k).count())
                        .collect();
                    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                    prop_assert!(hi - lo <= 1, "{:?}", counts);
                    prop_assert_eq!(*lo, take / classes);
                }
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn one_hot_rows_have_a_single_one(labels in prop::collection::vec(0usize..10, 1..40)) {
        let raw = RawDataset::new("p", [1, 1, 1], vec![0; labels.len()], labels.clone(), 10).unwrap();
        let ds = raw.to_dataset::<f64>().unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let row = ds.labels().row(i);
            prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(row[l], 1.0);
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}
