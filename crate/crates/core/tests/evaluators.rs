use ageprog::dataset::{build_dataset, load_record_image, synthetic_records, Sex, SyntheticSpec, AGE_GROUPS};
use ageprog::eval::{
    embedding_distance, train_embedding_net, train_gender_classifier, ClassifierConfig, EmbeddingConfig, EvalError, GenderScoreTable,
};
use ageprog::trainer::TrainingSet;

fn sets(count: usize, identities: usize, seed: u64, size: usize) -> (TrainingSet, TrainingSet) {
    let records = synthetic_records(&SyntheticSpec { count, seed, age_range: [0, 100], size, identities: Some(identities) }).unwrap();
    let split = build_dataset(&records, [0.70, 0.15, 0.15], seed).unwrap();
    (TrainingSet::load(&split.train, size).unwrap(), TrainingSet::load(&split.test, size).unwrap())
}

fn adult_accuracy(t: &GenderScoreTable) -> f64 {
    let (mut correct, mut total) = (0, 0);
    for sex in Sex::ALL {
        for g in 3..AGE_GROUPS {
            if let Some(c) = t.row(sex)[g] {
                correct += c.correct;
                total += c.total;
            }
        }
    }
    correct as f64 / total as f64
}

#[test]
fn classifier_separates_held_out_adults() {
    let (train, test) = sets(1000, 100, 31, 64);
    let cfg = ClassifierConfig::default();
    let (clf, table) = train_gender_classifier(&train, &test, &cfg).unwrap();
    let acc = adult_accuracy(&table);
    assert!(acc >= 0.95, "held-out adult accuracy {acc}");

    let (_, again) = train_gender_classifier(&train, &test, &cfg).unwrap();
    assert_eq!(table, again, "same seed, same table");

    let dir = tempfile::tempdir().unwrap();
    clf.save(dir.path()).unwrap();
    let loaded = ageprog::eval::GenderClassifier::load(dir.path()).unwrap();
    let imgs: Vec<_> = (0..10).map(|i| test.image(i)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    assert_eq!(clf.prob_female(&refs).unwrap(), loaded.prob_female(&refs).unwrap());
}

#[test]
fn classifier_needs_both_sexes() {
    let (train, test) = sets(60, 6, 4, 16);
    let males: Vec<usize> = (0..train.len()).filter(|&i| train.sexes[i] == Sex::Male).collect();
    let cfg = ClassifierConfig { widths: vec![4, 8], epochs: 1, ..ClassifierConfig::default() };
    let err = train_gender_classifier(&train.subset(&males), &test, &cfg).unwrap_err();
    assert!(matches!(err, EvalError::SingleClassDataset), "{err}");
}

#[test]
fn embedding_separates_held_out_identities() {
    // 200 identities at 5 ages each.
    let (train, _) = sets(1000, 200, 8, 64);
    let cfg = EmbeddingConfig::default();
    let net = train_embedding_net(&train, &cfg).unwrap();

    // Identities never seen in training, each rendered at two ages.
    let held = synthetic_records(&SyntheticSpec { count: 80, seed: 900, age_range: [0, 100], size: 64, identities: Some(40) }).unwrap();
    let images: Vec<_> = held.iter().map(|r| load_record_image(r, 64).unwrap()).collect();
    let refs: Vec<_> = images.iter().collect();
    let emb = net.embed(&refs).unwrap();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..held.len() {
        for j in i + 1..held.len() {
            let d = embedding_distance(&emb[i], &emb[j]).unwrap();
            if held[i].identity == held[j].identity {
                same.push(d);
            } else {
                diff.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(same.len(), 40);
    assert!(mean(&same) < mean(&diff), "same {} vs different {}", mean(&same), mean(&diff));
}

#[test]
fn embedding_training_is_seeded_and_needs_two_identities() {
    let (train, _) = sets(60, 6, 5, 16);
    let cfg = EmbeddingConfig { widths: vec![4, 8], dim: 8, steps: 5, pairs_per_step: 8, ..EmbeddingConfig::default() };
    let a = train_embedding_net(&train, &cfg).unwrap();
    let b = train_embedding_net(&train, &cfg).unwrap();
    assert_eq!(a.params, b.params);

    let one: Vec<usize> = (0..train.len()).filter(|&i| train.identities[i] == train.identities[0]).collect();
    let err = train_embedding_net(&train.subset(&one), &cfg).unwrap_err();
    assert!(matches!(err, EvalError::SingleIdentityDataset), "{err}");
}
