use natstream_core::learners::head::{weighted_ce_objective, Example};
use natstream_core::learners::{train_head_on_buffers, Head, PrototypeBuffers, TrainStatus};
use natstream_core::rng::seeded;
use natstream_core::Sample;

#[test]
fn head_fits_well_separated_prototypes() {
    let mut buffers = PrototypeBuffers::new(3, 2, 4).unwrap();
    let centers = [[0.0, 5.0], [5.0, 0.0], [-5.0, -5.0]];
    let mut stream = Vec::new();
    for i in 0..60 {
        let c = i % 3;
        let jitter = (i as f32 * 0.37).sin() * 0.5;
        stream.push(Sample::new(i as u64, vec![centers[c][0] as f32 + jitter, centers[c][1] as f32 - jitter], c, i as u32));
    }
    buffers.update(&stream).unwrap();
    assert!(buffers.buffers.iter().all(|b| b.len() <= 4));
    assert_eq!((0..3).map(|c| buffers.total_weight(c)).sum::<u64>(), 60);

    let mut head = Head::linear(3, 2);
    let mut rng = seeded(0);
    let status = train_head_on_buffers(&mut head, &buffers, 200, 4, 0.1, &mut rng).unwrap();
    assert!(matches!(status, TrainStatus::Trained { .. }));
    for (c, b) in buffers.buffers.iter().enumerate() {
        for p in b {
            assert_eq!(head.predict(&p.center).unwrap(), c);
        }
    }
}

#[test]
fn weight_equals_duplication() {
    let head = {
        let mut h = Head::linear(2, 2);
        h.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p = 0.1 * i as f64 - 0.2);
        h
    };
    let (a, b) = ([1.0, 2.0], [-1.0, 0.5]);
    let weighted = [Example { x: &a, label: 0, weight: 3.0 }, Example { x: &b, label: 1, weight: 1.0 }];
    let dup = [
        Example { x: &a, label: 0, weight: 1.0 },
        Example { x: &a, label: 0, weight: 1.0 },
        Example { x: &a, label: 0, weight: 1.0 },
        Example { x: &b, label: 1, weight: 1.0 },
    ];
    let (l1, g1) = weighted_ce_objective(&head, &weighted);
    let (l2, g2) = weighted_ce_objective(&head, &dup);
    assert!((l1 - l2).abs() < 1e-14);
    for (x, y) in g1.iter().zip(&g2) {
        assert!((x - y).abs() < 1e-14);
    }
}
