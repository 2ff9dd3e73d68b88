//! Raw-pixel and log-Gabor linear accuracies on the synthetic benchmark.
//!
//! `cargo run --release --example calibrate -- [noise] [seed]`

use lowshot::data::{split_train_test, synth_generate, ClassHierarchy, Dataset, SplitSpec, SynthParams};
use lowshot::gabor::{gabor_features_batch, make_log_gabor_bank, train_linear_classifier, LinearConfig, LogGaborParams};

fn accuracy(train: (&[Vec<f64>], &[usize]), test: (&[Vec<f64>], &[usize]), classes: usize) -> f64 {
    let clf = train_linear_classifier(train.0, train.1, classes, &LinearConfig::default()).unwrap();
    let hits = test.0.iter().zip(test.1).filter(|(x, &y)| clf.predict(x) == y).count();
    hits as f64 / test.1.len() as f64
}

fn pixels(d: &Dataset) -> Vec<Vec<f64>> {
    d.samples().iter().map(|s| s.image.pixels().iter().map(|&v| v as f64).collect()).collect()
}

fn images(d: &Dataset) -> Vec<&lowshot::data::Image> {
    d.samples().iter().map(|s| &s.image).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noise: f32 = args.first().and_then(|a| a.parse().ok()).unwrap_or(lowshot::data::DEFAULT_NOISE);
    let seed: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let h = ClassHierarchy::stages();
    let (d_t, d_s) = synth_generate(&SynthParams { noise, seed, ..SynthParams::default() }, &h).unwrap();
    let spec = SplitSpec { seed, ..SplitSpec::default() };
    let (tt, te) = split_train_test(&d_t, &SplitSpec { stratify: false, ..spec }).unwrap();
    let coarse =
        accuracy((&pixels(&tt), &tt.coarse_labels()), (&pixels(&te), &te.coarse_labels()), h.num_coarse());
    let (st, se) = split_train_test(&d_s, &spec).unwrap();
    let (yt, ye) = (st.fine_labels().unwrap(), se.fine_labels().unwrap());
    let fine = accuracy((&pixels(&st), &yt), (&pixels(&se), &ye), h.num_fine());
    let bank = make_log_gabor_bank(d_s.image_hw(), &LogGaborParams::default()).unwrap();
    let gt = gabor_features_batch(&images(&st), &bank).unwrap();
    let ge = gabor_features_batch(&images(&se), &bank).unwrap();
    let gabor = accuracy((&gt, &yt), (&ge, &ye), h.num_fine());
    println!("noise {noise}: raw coarse {coarse:.3}, raw fine {fine:.3}, gabor fine {gabor:.3}");
}
