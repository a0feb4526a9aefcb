//! Smoothed sentence BLEU, corpus BLEU and an approximate randomization test.

use cflearn::metrics::{ar_test, corpus_bleu, sentence_bleu, BleuConfig};
use cflearn::Result;

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> Result<()> {
    let reference = tokens("the cat sat on the mat");
    for hyp in ["the cat sat on the mat", "the cat sat on a mat", "a dog stood there", "mat"] {
        let smoothed = sentence_bleu(&tokens(hyp), &reference, &BleuConfig::default())?;
        let plain = sentence_bleu(&tokens(hyp), &reference, &BleuConfig::unsmoothed())?;
        println!("{hyp:<24} smoothed {smoothed:.4}  unsmoothed {plain:.4}");
    }

    let refs: Vec<Vec<String>> = ["a b c d e", "f g h i", "j k l m n o"].iter().map(|s| tokens(s)).collect();
    let good: Vec<Vec<String>> = ["a b c d e", "f g h x", "j k l m n"].iter().map(|s| tokens(s)).collect();
    let weak: Vec<Vec<String>> = ["a b x d y", "f z h", "j q l"].iter().map(|s| tokens(s)).collect();
    let pairs = |sys: &[Vec<String>]| sys.iter().cloned().zip(refs.iter().cloned()).collect::<Vec<_>>();
    let plain = BleuConfig::unsmoothed();
    println!("corpus BLEU good {:.4}  weak {:.4}", corpus_bleu(&pairs(&good), &plain)?, corpus_bleu(&pairs(&weak), &plain)?);

    let test = ar_test(&good, &weak, &refs, 1000, 0)?;
    println!(
        "approximate randomization: diff {:.4}, p = {:.4} over {} shuffles",
        test.observed_diff, test.p_value, test.iterations
    );
    Ok(())
}
