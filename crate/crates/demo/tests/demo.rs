use ageprog_demo::{age_strip, fr_sweep, gain, group_age, group_labels, render_face, sweep};

#[test]
fn face_is_rgba_and_deterministic() {
    let a = render_face(7, 30, true, 32).unwrap();
    assert_eq!(a.len(), 32 * 32 * 4);
    assert!(a.chunks_exact(4).all(|p| p[3] == 255));
    assert_eq!(a, render_face(7, 30, true, 32).unwrap());
    assert_ne!(a, render_face(8, 30, true, 32).unwrap());
    assert!(render_face(7, 101, true, 32).is_err());
    assert!(render_face(7, 30, true, 2).is_err());
}

#[test]
fn strip_places_groups_left_to_right() {
    let size = 16;
    let strip = age_strip(3, false, size).unwrap();
    assert_eq!(strip.len(), 10 * size * size * 4);
    for g in [0, 4, 9] {
        let face = render_face(3, group_age(g), false, size).unwrap();
        for y in 0..size {
            let row = &strip[(y * 10 * size + g * size) * 4..(y * 10 * size + (g + 1) * size) * 4];
            assert_eq!(row, &face[y * size * 4..(y + 1) * size * 4], "group {g} row {y}");
        }
    }
    assert_eq!(group_labels().split(',').count(), 10);
    assert_eq!((group_age(0), group_age(4), group_age(9)), (2, 25, 85));
}

#[test]
fn sweep_matches_direct_counts() {
    let d = [0.5, 1.0, 1.7, 2.2, 3.0];
    let s = sweep(&d, &[1.6, 2.0, 2.5]).unwrap();
    let scores: Vec<f64> = s.scores.iter().map(|p| p.score).collect();
    assert_eq!(scores, vec![0.4, 0.6, 0.8]);
    assert_eq!(s.curve.first().unwrap().score, 0.0);
    assert_eq!(s.curve.last().unwrap().score, 1.0);
    assert!(s.curve.windows(2).all(|w| w[0].score <= w[1].score));
    assert!((s.stats.mean - 1.68).abs() < 1e-12);

    let json: serde_json::Value = serde_json::from_str(&fr_sweep("0.5, 1.0 1.7,2.2 3.0", "1.6").unwrap()).unwrap();
    assert_eq!(json["scores"][0]["score"], 0.4);
    assert!(fr_sweep("1, x", "1.6").is_err());
    assert!(fr_sweep("1", "1.6").is_err(), "one distance has no sample SD");
}

#[test]
fn gain_follows_direction() {
    assert!((gain(0.38, 0.47, true) - 23.684).abs() < 1e-3);
    assert!((gain(1.88, 1.77, false) - 5.851).abs() < 1e-3);
    assert!(gain(0.0, 0.5, true).is_nan());
}
