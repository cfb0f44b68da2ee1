//! Monte Carlo check that the ensemble target is an unbiased estimator of
//! the single-view feature mean under transform randomness: for a fixed
//! source image, E[f̄] = E[f(t(x))] coordinatewise. The two sides use
//! independent transform streams; agreement is asserted within 3 standard
//! errors of the difference of means.

use rand::Rng;
use siamlab::augment::{generate_views, preset};
use siamlab::graph::Graph;
use siamlab::losses::ensemble_target;
use siamlab::model::{build_model, Backbone, EncoderSpec, Mode, ModelSession, PredictorSpec};
use siamlab::rng::StreamKey;
use siamlab::tensor::Tensor;

#[test]
fn ensemble_target_unbiased_over_transform_randomness() {
    let enc = EncoderSpec {
        backbone: Backbone::TinyConv,
        image_size: 16,
        in_channels: 3,
        base_channels: 1,
        batch_norm: false,
        small_input_stem: true,
        projector_layers: 2,
        projector_hidden_dim: 8,
        projector_out_dim: 8,
    };
    let pred = PredictorSpec { hidden_dim: 4, in_out_dim: 8 };
    let model = build_model(&enc, &pred, 77).unwrap();
    let d = 8usize;
    let k = 4usize;
    let n_ens = 2_000u64;

    let img = {
        let mut rng = StreamKey::root(77).tag("source-image").rng();
        let v: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(&[1, 3, 16, 16], v).unwrap()
    };
    let cfg = preset("default").unwrap();

    let mut ens_sum = vec![0.0; d];
    let mut ens_sumsq = vec![0.0; d];
    let mc_ens = StreamKey::root(77).tag("mc-ensemble");
    for r in 0..n_ens {
        let vb = generate_views(&img, &[0], k, &cfg, &mc_ens.index(r)).unwrap();
        let mut g = Graph::new();
        let mut sess = ModelSession::new(&model, Mode::Eval);
        let fs: Vec<_> = vb
            .views
            .iter()
            .map(|v| sess.encode(&mut g, v).unwrap().projected)
            .collect();
        let fbar = ensemble_target(&mut g, &fs).unwrap();
        for (j, &v) in fbar.values(&g).data().iter().enumerate() {
            ens_sum[j] += v;
            ens_sumsq[j] += v * v;
        }
    }

    let n_single = n_ens * k as u64;
    let mut single_sum = vec![0.0; d];
    let mut single_sumsq = vec![0.0; d];
    let mc_single = StreamKey::root(77).tag("mc-single");
    for r in 0..n_single {
        let vb = generate_views(&img, &[0], 1, &cfg, &mc_single.index(r)).unwrap();
        let mut g = Graph::new();
        let mut sess = ModelSession::new(&model, Mode::Eval);
        let f = sess.encode(&mut g, &vb.views[0]).unwrap().projected;
        for (j, &v) in f.values(&g).data().iter().enumerate() {
            single_sum[j] += v;
            single_sumsq[j] += v * v;
        }
    }

    for j in 0..d {
        let (na, nb) = (n_ens as f64, n_single as f64);
        let ma = ens_sum[j] / na;
        let mb = single_sum[j] / nb;
        let va = (ens_sumsq[j] / na - ma * ma).max(0.0) * na / (na - 1.0);
        let vb = (single_sumsq[j] / nb - mb * mb).max(0.0) * nb / (nb - 1.0);
        let se = (va / na + vb / nb).sqrt();
        let dev = (ma - mb).abs();
        assert!(
            dev <= 3.0 * se,
            "coordinate {j}: |{ma:.6} - {mb:.6}| = {dev:.3e} exceeds 3 SE = {:.3e}",
            3.0 * se
        );
    }
}
