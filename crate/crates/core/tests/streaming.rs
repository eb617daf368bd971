use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2svc::autodiff::Eager;
use s2svc::model::{ModelConfig, NoiseMode, StudentModel};
use s2svc::nn::{BandedSelfAttention, CausalConvGluLayer};
use s2svc::params::ParamStore;
use s2svc::stream::*;
use s2svc::tensor::Tensor;

const CHUNKS: [usize; 6] = [1, 2, 3, 5, 8, 16];

fn random_seq(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn chunked(x: &Tensor<f64>, s: usize, mut step: impl FnMut(&Tensor<f64>) -> Tensor<f64>) -> Tensor<f64> {
    let mut out: Option<Tensor<f64>> = None;
    let mut start = 0;
    while start < x.cols() {
        let w = s.min(x.cols() - start);
        let y = step(&x.cols_range(start, w).unwrap());
        out = Some(match out {
            None => y,
            Some(o) => hcat(&o, &y).unwrap(),
        });
        start += w;
    }
    out.unwrap()
}

fn small_config(dilations: Vec<usize>, kernel: usize) -> ModelConfig {
    ModelConfig { bands: 3, reduction: 2, context: 6, embedding: 2, kernel_size: kernel, dilations, noise_dim: 2, ..ModelConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_conv_is_bit_exact(
        seed in any::<u64>(),
        kernel in 1usize..6,
        dilation in 1usize..10,
        channels in 1usize..5,
        weight_norm in any::<bool>(),
    ) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = CausalConvGluLayer::new(&mut store, "c", channels, 3, kernel, dilation, weight_norm, &mut rng);
        let x = random_seq(channels, 64, seed ^ 1);
        let full = layer.forward(&mut Eager, &store, &x).unwrap();
        let compiled = layer.compile(&store).unwrap();
        prop_assert_eq!(compiled.padding(), dilation * (kernel - 1));
        for s in CHUNKS {
            let mut cache = Tensor::zeros(&[channels, compiled.padding()]);
            let out = chunked(&x, s, |c| causal_conv_chunked(&mut cache, &compiled, c).unwrap());
            prop_assert_eq!(&out, &full);
        }
    }

    #[test]
    fn chunked_banded_attention_is_bit_exact(seed in any::<u64>(), lookback in 1usize..12, channels in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = BandedSelfAttention::new(&mut store, "a", channels, 3, lookback, &mut rng).compile(&store);
        let x = random_seq(channels, 64, seed ^ 2);
        let full = layer.forward(&x).unwrap();
        for s in CHUNKS {
            let mut cache = Tensor::zeros(&[channels, lookback]);
            let out = chunked(&x, s, |c| banded_attention_chunked(&mut cache, &layer, c).unwrap());
            prop_assert_eq!(&out, &full);
        }
    }

    #[test]
    fn identity_cascade_is_bit_exact(seed in any::<u64>(), k in 1usize..3, kt in 1usize..3) {
        let model = StudentModel::<f64>::new(small_config(vec![1, 3, 9, 2], 3), seed).unwrap();
        let x = random_seq(6, 64, seed ^ 3);
        let batch = model.identity_forward(&x, k, kt).unwrap();
        for s in CHUNKS {
            let cfg = StreamConfig { window: s, identity: true, ..StreamConfig::default() };
            let mut st = stream_init(&model, cfg, k, kt).unwrap();
            prop_assert_eq!(&stream_sequence(&mut st, &x).unwrap(), &batch);
            prop_assert_eq!(st.frames_emitted, 64);
        }
    }
}

#[test]
fn cache_lengths_follow_dilated_kernels() {
    let cfg = small_config(vec![1, 3, 9], 5);
    let model = StudentModel::<f64>::new(cfg, 1).unwrap();
    let st = stream_init(&model, StreamConfig::default(), 1, 2).unwrap();
    assert_eq!(st.cache_lengths(), vec![4, 12, 36, 4, 12, 36, 4, 12, 36]);
}

#[test]
fn gaussian_stream_emits_every_frame_and_pins_each_window() {
    let model = StudentModel::<f64>::new(small_config(vec![1, 2], 3), 6).unwrap();
    let x = random_seq(6, 37, 4);
    for s in [1, 4, 7] {
        let cfg = StreamConfig { window: s, ..StreamConfig::default() };
        let mut st = stream_init(&model, cfg, 1, 2).unwrap();
        let mut total = 0;
        let mut start = 0;
        while start < 37 {
            let w = s.min(37 - start);
            let y = st.push_chunk(&x.cols_range(start, w).unwrap()).unwrap();
            assert_eq!(y.cols(), w);
            assert!(y.is_finite());
            let mean = st.last_params().unwrap().mean_centers();
            assert_eq!(mean[0], 1.0);
            assert_eq!(mean[s - 1], s as f64);
            total += w;
            start += w;
        }
        assert_eq!(total, 37);
        assert_eq!(st.frames_emitted, 37);
    }
}

#[test]
fn sampled_noise_is_reproducible_and_differs_from_zeros() {
    let model = StudentModel::<f64>::new(small_config(vec![1, 2], 3), 6).unwrap();
    let x = random_seq(6, 16, 8);
    let run = |noise| {
        let mut st = stream_init(&model, StreamConfig { window: 4, noise, ..StreamConfig::default() }, 1, 2).unwrap();
        stream_sequence(&mut st, &x).unwrap()
    };
    assert_eq!(run(NoiseMode::Sample(3)), run(NoiseMode::Sample(3)));
    assert_ne!(run(NoiseMode::Sample(3)), run(NoiseMode::Zeros));
}

#[test]
fn timing_report_covers_every_window() {
    let model = StudentModel::<f64>::new(small_config(vec![1, 2], 3), 2).unwrap();
    let x = random_seq(6, 30, 1);
    let mut st = stream_init(&model, StreamConfig { window: 8, ..StreamConfig::default() }, 1, 2).unwrap();
    let mut start = 0;
    let mut seen = 0;
    let report = measure_stream_with(
        &mut st,
        HOP_SECONDS * 2.0,
        || {
            if start >= 30 {
                return None;
            }
            let w = 8.min(30 - start);
            let c = x.cols_range(start, w);
            start += w;
            Some(c)
        },
        |y| {
            seen += y.cols();
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, 30);
    assert_eq!(report.windows.len(), 4);
    assert_eq!(report.output.cols(), 30);
    assert!((report.input_seconds - 30.0 * 2.0 * HOP_SECONDS).abs() < 1e-12);
    assert!(report.rtf > 0.0 && report.mapping_rtf <= report.rtf);
    let csv = report.timing_csv();
    assert_eq!(csv.lines().next(), Some("window_index,ms_feature,ms_mapping,ms_total"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn non_finite_input_aborts_with_position() {
    let model = StudentModel::<f64>::new(small_config(vec![1], 3), 2).unwrap();
    let mut st = stream_init(&model, StreamConfig { window: 4, ..StreamConfig::default() }, 1, 2).unwrap();
    st.push_chunk(&random_seq(6, 4, 1)).unwrap();
    let mut bad = random_seq(6, 4, 2);
    bad.set(2, 1, f64::NAN);
    let err = st.push_chunk(&bad).unwrap_err().to_string();
    assert!(err.contains("frame 5"), "{err}");
}
