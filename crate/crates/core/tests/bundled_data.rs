use std::path::{Path, PathBuf};

use dynsparse::io::corpus::Corpus;
use dynsparse::io::mnist::load_mnist_split;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

#[test]
fn mnist_files_have_standard_shapes() {
    let train = load_mnist_split(&data("mnist"), true).unwrap();
    let test = load_mnist_split(&data("mnist"), false).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.image_shape(), (28, 28));
    assert_eq!(train.dim(), 784);
    assert!(train.labels().iter().all(|&l| l < 10));
    let mut seen = [0usize; 10];
    test.labels().iter().for_each(|&l| seen[l as usize] += 1);
    assert!(seen.iter().all(|&n| n > 800));
    let x = train.features(0);
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn tiny_corpus_vocabulary_is_stable() {
    let c = Corpus::load(&data("tiny-corpus")).unwrap();
    assert_eq!(c.vocab.len(), 378);
    assert_eq!(c.train.len(), 80_023);
    assert!(c.valid.iter().chain(&c.test).all(|&id| id < c.vocab.len()));
    assert!(c.vocab.id("<eos>").is_some());
}
