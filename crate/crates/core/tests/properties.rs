use proptest::prelude::*;

use mk_core::geometry::{act_on_field, enumerate_hyperoctahedral, GridShape, TensorField};
use mk_core::io::{read_checkpoint, read_tensor, write_checkpoint, write_tensor, Checkpoint, Tensor};
use mk_core::kernels::{assemble_moment_kernel, enumerate_signatures, MomentKernel, RadialProfile};
use mk_core::network::{FieldStack, HeadKind};
use mk_core::tasks::metrics::macro_auc;
use mk_core::tasks::{accuracy, iou_ellipse, yolo_loss, CellClass, Ellipse, YoloConfig};
use mk_core::train::{RunConfig, Task};

fn ellipse() -> impl Strategy<Value = Ellipse> {
    (2.0..30.0f64, 2.0..30.0f64, 1.0..8.0f64, 1.0..8.0f64, 0.0..3.2f64)
        .prop_map(|(x, y, a, b, t)| Ellipse::from_axes([x, y], a, b, t, CellClass::Smooth))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in ellipse(), b in ellipse()) {
        let ab = iou_ellipse(&a, &b, 64).value;
        let ba = iou_ellipse(&b, &a, 64).value;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((iou_ellipse(&a, &a, 64).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_auc_are_fractions(
        labels in prop::collection::vec(0usize..3, 1..40),
        seed in any::<u64>(),
    ) {
        let preds: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| (l + (seed as usize >> (i % 60)) % 2) % 3).collect();
        let acc = accuracy(&preds, &labels);
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(accuracy(&labels, &labels), 1.0);
        let scores: Vec<Vec<f64>> = preds.iter().map(|&p| (0..3).map(|k| if k == p { 1.0 } else { 0.0 }).collect()).collect();
        let auc = macro_auc(&scores, &labels);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn yolo_loss_is_non_negative(
        raw in prop::collection::vec(-3.0..3.0f64, 17 * 16),
        truths in prop::collection::vec(ellipse(), 0..3),
    ) {
        let pred = FieldStack::new(GridShape::cube(2, 4), HeadKind::Detect.out_spec(2), 1, raw).unwrap();
        let truths: Vec<Ellipse> = truths
            .into_iter()
            .map(|mut e| { e.center = vec![e.center[0] / 2.0, e.center[1] / 2.0]; e })
            .collect();
        let (l, g) = yolo_loss(&pred, &[truths], &YoloConfig::default()).unwrap();
        for term in [l.coord, l.conf_obj, l.conf_noobj, l.class, l.total] {
            prop_assert!(term >= 0.0 && term.is_finite());
        }
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(0usize..5, 0..4), wide in any::<bool>(), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) % 1000) as f64 / 7.0 - 50.0).collect();
        let t = if wide {
            Tensor::from_real::<f64>(dims.len() as u8, dims.clone(), &values).unwrap()
        } else {
            let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
            Tensor::from_real::<f32>(dims.len() as u8, dims.clone(), &v).unwrap()
        };
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn checkpoint_round_trip(step in any::<u64>(), seed in any::<u64>(), names in prop::collection::btree_set("[a-z.]{1,12}", 0..5)) {
        let blobs = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, Tensor::from_real::<f64>(1, vec![i], &vec![i as f64; i]).unwrap()))
            .collect();
        let ck = Checkpoint { config: "task = detect\n".into(), step, seed, blobs };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        prop_assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn config_text_round_trip(lr in 1e-6..1.0f64, epochs in 0usize..500, seed in any::<u64>(), layers in 1usize..9, baseline in any::<bool>()) {
        let mut c = RunConfig::preset(Task::Classify);
        c.lr = lr;
        c.epochs = epochs;
        c.arch.seed = seed;
        c.arch.layers = layers;
        c.baseline = baseline;
        prop_assert_eq!(RunConfig::from_text(&c.to_text(), None).unwrap(), c);
    }

    /// `g⁻¹ · (g · f) = f` and the action composes, on random rank-2 fields.
    #[test]
    fn field_action_is_a_group_action(gi in 0usize..48, hi in 0usize..48, seed in any::<u64>()) {
        let group = enumerate_hyperoctahedral(3);
        let (g, h) = (&group[gi], &group[hi]);
        let f = TensorField::from_fn(GridShape::cube(3, 4), 2, |c, p| {
            ((seed.wrapping_mul(31) ^ (c * 97 + p[0] * 13 + p[1] * 7 + p[2]) as u64) % 101) as f64
        });
        let back = act_on_field(&g.inverse(), &act_on_field(g, &f).unwrap()).unwrap();
        prop_assert_eq!(&back, &f);
        let two = act_on_field(g, &act_on_field(h, &f).unwrap()).unwrap();
        prop_assert_eq!(two, act_on_field(&g.compose(h), &f).unwrap());
    }

    /// Moment kernels with odd rank flip sign under central inversion; even
    /// ranks are unchanged.
    #[test]
    fn kernel_parity(rank in 0usize..5, pick in any::<usize>(), profile in prop::collection::vec(-2.0..2.0f64, 3)) {
        let sigs = enumerate_signatures(rank);
        let signature = sigs[pick % sigs.len()].clone();
        let k = assemble_moment_kernel(&MomentKernel { dim: 2, signature, profile: RadialProfile::new(profile), support: 3 }).unwrap();
        let npix = 9;
        let sign = if rank % 2 == 0 { 1.0 } else { -1.0 };
        for c in 0..k.num_components() {
            for p in 0..npix {
                let a = k.data()[c * npix + p];
                let b = k.data()[c * npix + npix - 1 - p];
                prop_assert!((a - sign * b).abs() < 1e-12);
            }
        }
    }
}
