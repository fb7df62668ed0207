use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{encoder_digest, Checkpoint};
use super::*;
use crate::error::Error;
use crate::tensor::{finite_difference_check_params, Tape, Tensor};

fn images(seed: u64, shape: [usize; 4]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0f32..1.0))
}

#[test]
fn encoder_output_stride_is_eight_with_factor_four() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.output_stride(), 8);
    let mut model = SdrlModel::new(&cfg, &HeadConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(2, [1, 3, 32, 32]));
    let f = model.encode(&mut tape, x, Mode::Train).unwrap();
    assert_eq!(tape.value(f).shape(), &[1, 64, 4, 4]);

    let x = tape.constant(images(2, [1, 3, 256, 256]));
    let f = model.encode(&mut tape, x, Mode::Eval).unwrap();
    assert_eq!(tape.value(f).shape(), &[1, 64, 32, 32]);
}

#[test]
fn paper_scale_config_is_valid() {
    let cfg = EncoderConfig::paper_scale();
    cfg.validate().unwrap();
    assert_eq!(cfg.out_channels, 512);
    assert_eq!(cfg.output_stride(), 8);
    HeadConfig::paper_scale().validate().unwrap();
}

#[test]
fn encoder_rejects_indivisible_inputs() {
    let mut model = SdrlModel::new(&EncoderConfig::default(), &HeadConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(2, [1, 3, 48, 64]));
    assert!(matches!(model.encode(&mut tape, x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn encoder_is_a_pure_function_of_shared_weights() {
    let mut model = SdrlModel::new(&EncoderConfig::default(), &HeadConfig::default(), 3).unwrap();
    let img = images(4, [2, 3, 32, 32]);
    let mut tape = Tape::new();
    let a = tape.constant(img.clone());
    let b = tape.constant(img);
    let fa = model.encode(&mut tape, a, Mode::Eval).unwrap();
    let fb = model.encode(&mut tape, b, Mode::Eval).unwrap();
    assert_eq!(tape.value(fa), tape.value(fb));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = EncoderConfig::default();
    cfg.out_channels = 32;
    assert!(cfg.validate().is_err());
    let mut cfg = EncoderConfig::default();
    cfg.output_upsample_factor = 3;
    assert!(cfg.validate().is_err());
    let cd = CdNetConfig {
        num_classes: 3,
        ..CdNetConfig::default()
    };
    assert!(cd.validate().is_err());
}

#[test]
fn heads_map_batches_to_output_dim() {
    let heads = HeadConfig::default();
    let mut model = SdrlModel::new(&EncoderConfig::default(), &heads, 5).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([6, 64]));
    let z = model.project(&mut tape, x, Mode::Train).unwrap();
    assert_eq!(tape.value(z).shape(), &[6, heads.out_dim]);
    assert!(tape.value(z).all_finite());
    let p = model.predict(&mut tape, z, Mode::Train).unwrap();
    assert_eq!(tape.value(p).shape(), &[6, heads.out_dim]);
    assert!(tape.value(p).all_finite());

    let bad = tape.constant(Tensor::zeros([6, 63]));
    assert!(model.project(&mut tape, bad, Mode::Train).is_err());
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let heads = HeadConfig {
        projector_hidden: 8,
        predictor_hidden: 6,
        out_dim: 5,
    };
    let enc = EncoderConfig {
        stage_channels: vec![4, 4],
        out_channels: 4,
        output_upsample_factor: 1,
        ..EncoderConfig::default()
    };
    let model = SdrlModel::new(&enc, &heads, 9).unwrap();
    let input = images(10, [1, 1, 7, 5]).reshaped([7, 5]).unwrap();
    let target = images(11, [1, 1, 7, 5]).reshaped([7, 5]).unwrap();
    let net = model.net.clone();
    let loss = |tape: &mut Tape, store: &mut crate::tensor::ParamStore| {
        let z = tape.constant(input.clone());
        let p = net.predict(tape, store, z, Mode::Train)?;
        let t = tape.constant(target.clone());
        tape.dot(p, t)
    };
    // fc1.bias feeds a train-mode batch norm, so its true gradient is zero and
    // a relative comparison only measures f32 noise
    let report = finite_difference_check_params(loss, &model.store, 1e-3, 12, |n| {
        n.starts_with("predictor.") && n != "predictor.fc1.bias"
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-2, "{report:?}");
    assert!(report.coords_checked > 30);

    let mut tape = Tape::new();
    let mut store = model.store.clone();
    let out = loss(&mut tape, &mut store).unwrap();
    let g = tape.backward(out).unwrap();
    let bias = model.net.predictor.fc1.bias;
    assert!(g.param(bias).unwrap().iter().all(|v| v.abs() < 1e-5));
}

fn small_cd() -> CdNetConfig {
    CdNetConfig {
        encoder: EncoderConfig {
            stage_channels: vec![8, 8, 16, 16],
            out_channels: 16,
            ..EncoderConfig::default()
        },
        fpn_channels: 8,
        num_classes: 2,
    }
}

#[test]
fn cdnet_logits_have_input_resolution() {
    let mut net = CdNet::new(&CdNetConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let a = tape.constant(images(1, [1, 3, 64, 64]));
    let b = tape.constant(images(2, [1, 3, 64, 64]));
    let out = net.forward(&mut tape, a, b, Mode::Train).unwrap();
    assert_eq!(tape.value(out.logits).shape(), &[1, 2, 64, 64]);
}

#[test]
fn cdnet_identical_epochs_give_zero_difference() {
    let mut net = CdNet::new(&small_cd(), 2).unwrap();
    let img = images(3, [2, 3, 64, 64]);
    let mut tape = Tape::new();
    let a = tape.constant(img.clone());
    let b = tape.constant(img);
    let out = net.forward(&mut tape, a, b, Mode::Eval).unwrap();
    for d in out.diffs {
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cdnet_is_symmetric_in_its_inputs() {
    let mut net = CdNet::new(&small_cd(), 4).unwrap();
    let (i1, i2) = (images(5, [2, 3, 64, 64]), images(6, [2, 3, 64, 64]));
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(i1), tape.constant(i2));
    let ab = net.forward(&mut tape, a, b, Mode::Eval).unwrap().logits;
    let ba = net.forward(&mut tape, b, a, Mode::Eval).unwrap().logits;
    assert_eq!(tape.value(ab), tape.value(ba));
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let cfg = small_cd();
    let mut net = CdNet::new(&cfg, 7).unwrap();
    // move running stats away from their initial values
    {
        let mut tape = Tape::new();
        let a = tape.constant(images(8, [2, 3, 64, 64]));
        let b = tape.constant(images(9, [2, 3, 64, 64]));
        net.forward(&mut tape, a, b, Mode::Train).unwrap();
    }
    let ckpt = Checkpoint::from_store(&net.store, encoder_digest(&cfg.encoder));
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"SDRL");
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, ckpt);

    let mut fresh = CdNet::new(&cfg, 99).unwrap();
    let n = back.load_into(&mut fresh.store, "", &encoder_digest(&cfg.encoder)).unwrap();
    assert_eq!(n, net.store.named_tensors().count());

    let (i1, i2) = (images(10, [1, 3, 64, 64]), images(11, [1, 3, 64, 64]));
    let run = |m: &mut CdNet| {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(i1.clone()), tape.constant(i2.clone()));
        let l = m.forward(&mut tape, a, b, Mode::Eval).unwrap().logits;
        tape.value(l).clone()
    };
    assert_eq!(run(&mut net), run(&mut fresh));
}

#[test]
fn pretrained_encoder_transfers_into_cdnet() {
    let cfg = small_cd();
    let pre = SdrlModel::new(&cfg.encoder, &HeadConfig::default(), 1).unwrap();
    let ckpt = Checkpoint::from_store(&pre.store, encoder_digest(&cfg.encoder));
    let mut cd = CdNet::new(&cfg, 2).unwrap();
    let n = ckpt.load_into(&mut cd.store, "encoder.", &encoder_digest(&cfg.encoder)).unwrap();
    assert!(n > 0);
    let name = "encoder.stem.conv.weight";
    assert_eq!(cd.store.tensor_by_name(name), pre.store.tensor_by_name(name));

    let other = CdNetConfig::default();
    let mut cd2 = CdNet::new(&other, 2).unwrap();
    let err = ckpt.load_into(&mut cd2.store, "encoder.", &encoder_digest(&other.encoder));
    assert!(matches!(err, Err(Error::CheckpointIncompatible(_))));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ckpt = Checkpoint {
        digest: [0; 32],
        tensors: vec![("a".into(), Tensor::from_vec(vec![1.0, 2.0]))],
    };
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::read_from(&mut bad_magic.as_slice()).is_err());
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(Checkpoint::read_from(&mut bad_version.as_slice()).is_err());
    let truncated = &bytes[..bytes.len() - 2];
    assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
}

#[test]
fn batch_norm_running_stats_follow_momentum() {
    let mut store = crate::tensor::ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    bn.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
    let mean = store.buffer(bn.running_mean).item();
    let var = store.buffer(bn.running_var).item();
    assert!((mean - 0.25).abs() < 1e-6);
    // unbiased variance of 1..4 is 5/3
    assert!((var - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
}
