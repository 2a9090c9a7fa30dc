use groundkit::phonetics::{acoustic_distance, confusable_pairs, synthesize_audio, Phonetics, BLANK, FRAMES};
use proptest::prelude::*;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimum over every alignment, enumerated by plain recursion.
fn brute_alignment(ph: &Phonetics, a: &[usize], b: &[usize]) -> f64 {
    let inv = ph.inventory();
    let indel = |p: usize| euclid(inv.features(p), &vec![0.0; inv.dim()]) + 0.5;
    match (a.split_first(), b.split_first()) {
        (None, None) => 0.0,
        (Some((&x, rest)), None) => indel(x) + brute_alignment(ph, rest, b),
        (None, Some((&y, rest))) => indel(y) + brute_alignment(ph, a, rest),
        (Some((&x, ra)), Some((&y, rb))) => {
            let sub = euclid(inv.features(x), inv.features(y)) + brute_alignment(ph, ra, rb);
            let del = indel(x) + brute_alignment(ph, ra, b);
            let ins = indel(y) + brute_alignment(ph, a, rb);
            sub.min(del).min(ins)
        }
    }
}

fn phones() -> impl Strategy<Value = Vec<usize>> {
    let n = Phonetics::default().inventory().len();
    prop::collection::vec(1..n, 0..6)
}

proptest! {
    #[test]
    fn distance_matches_exhaustive_alignment(a in phones(), b in phones()) {
        let ph = Phonetics::default();
        let fast = acoustic_distance(ph.inventory(), &a, &b);
        prop_assert!((fast - brute_alignment(&ph, &a, &b)).abs() < 1e-9);
    }

    #[test]
    fn distance_is_a_metric(a in phones(), b in phones(), c in phones()) {
        let inv = Phonetics::default().inventory().clone();
        let ab = acoustic_distance(&inv, &a, &b);
        prop_assert!(acoustic_distance(&inv, &a, &a).abs() < 1e-12);
        prop_assert!((ab - acoustic_distance(&inv, &b, &a)).abs() < 1e-9);
        prop_assert!(ab <= acoustic_distance(&inv, &a, &c) + acoustic_distance(&inv, &c, &b) + 1e-9);
    }
}

#[test]
fn confusable_pairs_match_exhaustive_ranking() {
    let ph = Phonetics::default();
    let words: Vec<&str> = ph.words().take(25).collect();
    let mut expected = Vec::new();
    for (i, a) in words.iter().enumerate() {
        for b in &words[i + 1..] {
            let (x, y) = if a < b { (*a, *b) } else { (*b, *a) };
            let d = brute_alignment(&ph, ph.pronunciation(x).unwrap(), ph.pronunciation(y).unwrap());
            expected.push((d, x.to_string(), y.to_string()));
        }
    }
    expected.sort_by(|p, q| p.0.total_cmp(&q.0).then_with(|| p.1.cmp(&q.1)).then_with(|| p.2.cmp(&q.2)));
    let got = confusable_pairs(&ph, &words, 10).unwrap();
    assert_eq!(got.len(), 10);
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!((&g.first, &g.second), (&e.1, &e.2));
        assert!((g.distance - e.0).abs() < 1e-9);
    }
}

#[test]
fn clean_audio_reproduces_features_with_bounded_durations() {
    let ph = Phonetics::default();
    let seq = ph.text_to_phonemes("go to red box").unwrap();
    let audio = synthesize_audio(&seq, ph.inventory(), 0.0, 5).unwrap();
    assert_eq!(audio.num_frames(), FRAMES);
    assert!(seq.ids.iter().all(|&p| p != BLANK));
    assert!(audio.valid_length >= 2 * seq.ids.len() && audio.valid_length <= 5 * seq.ids.len());
    let again = synthesize_audio(&seq, ph.inventory(), 0.0, 5).unwrap();
    assert_eq!(audio, again);
    let noisy = synthesize_audio(&seq, ph.inventory(), 0.5, 5).unwrap();
    assert_ne!(audio, noisy);
    assert_eq!(audio.valid_length, noisy.valid_length);
}
