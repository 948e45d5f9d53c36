use brainseg::autodiff::Tape;
use brainseg::losses::{pixel_ce, presence_bce, seg_loss};
use brainseg::{LabelMap, Tensor};

#[test]
fn uniform_logits_cost_log_k() {
    for k in [2usize, 5, 9] {
        let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % k) as u8).collect());
        for fill in [0.0, 3.5, -20.0] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::full([k, 4, 4], fill));
            let ce = pixel_ce(&mut tape, x, &labels).unwrap();
            assert!((tape.value(ce).item() - (k as f64).ln()).abs() < 1e-6, "K={k}");
        }
    }
}

#[test]
fn zero_presence_logits_cost_log_2() {
    for truth in [vec![true], vec![false, true, true], vec![false; 8]] {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([truth.len()]));
        let bce = presence_bce(&mut tape, z, &truth).unwrap();
        assert!((tape.value(bce).item() - 2f64.ln()).abs() < 1e-6);
    }
}

#[test]
fn confident_correct_logits_cost_almost_nothing() {
    let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]);
    let mut logits = Tensor::full([3, 2, 2], -30.0f64);
    for (i, &l) in labels.data().iter().enumerate() {
        logits.data_mut()[l as usize * 4 + i] = 30.0;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(logits);
    let s = seg_loss(&mut tape, x, &labels).unwrap();
    assert!(tape.value(s.total).item() < 1e-6);
    assert!(tape.value(s.ce).item() >= 0.0);
}

#[test]
fn seg_loss_is_bounded_by_ce_plus_one() {
    let labels = LabelMap::new(3, 3, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]);
    for seed in 0..20u32 {
        let data: Vec<f64> = (0..36).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed.wrapping_mul(40503)) % 1000) as f64 / 100.0 - 5.0).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([4, 3, 3], data));
        let s = seg_loss(&mut tape, x, &labels).unwrap();
        let (total, ce) = (tape.value(s.total).item(), tape.value(s.ce).item());
        assert!(total >= 0.0 && total <= ce + 1.0 + 1e-12);
    }
}
