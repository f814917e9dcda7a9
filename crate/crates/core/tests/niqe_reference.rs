use std::path::Path;

use msgan::imageio::{load_gray, load_image};
use msgan::metrics::{niqe, NssModel};
use msgan::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAMERA: f64 = 3.0963768579403177;
const COINS: f64 = 3.6226789813501847;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn score(name: &str) -> f64 {
    niqe(&load_gray(&fixture(name)).unwrap(), NssModel::builtin()).unwrap()
}

#[test]
fn canonical_images_match_reference_within_five_percent() {
    for (name, reference) in [("camera.png", CAMERA), ("coins.png", COINS)] {
        let got = score(name);
        let rel = (got - reference).abs() / reference;
        println!("{name}: {got} (reference {reference}, rel {rel:.2e})");
        assert!(rel < 0.05, "{name}: {got} vs {reference}");
    }
}

#[test]
fn uniform_noise_scores_worse_than_photographs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = (0..192 * 192).map(|_| rng.gen_range(0..=255u8) as f64 / 127.5 - 1.0).collect();
    let noise = Tensor::from_vec([1, 1, 192, 192], data).unwrap();
    let n = niqe(&noise, NssModel::builtin()).unwrap();
    assert!(n >= 0.0);
    assert!(n > score("camera.png") && n > score("coins.png"), "noise {n}");
}

#[test]
fn rgb_input_uses_luma() {
    let rgb = niqe(&load_image(&fixture("coins.png")).unwrap(), NssModel::builtin()).unwrap();
    assert!(rgb.is_finite() && rgb >= 0.0);
}
