use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use spectraleaf::raster_io::{load_image, save_image, SampleFormat};
use spectraleaf::spectral::{extract_rgb, NormalizeMode};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spectraleaf"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> Output {
    run(&["gen-data", "--n", "6", "--size", "64", "--seed", seed, "--out", p(dir)])
}

/// A small dataset with one 9-band and one 3-band checkpoint, shared by
/// the tests that only read it.
struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    ckpt9: PathBuf,
    ckpt3: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        assert!(gen(&data, "3").status.success());
        let train = |channels: &str, head: &str, name: &str| {
            let out = root.path().join(name);
            let o = run(&[
                "train", "--data", p(&data), "--model", "tiny", "--channels", channels, "--head", head,
                "--epochs", "1", "--lr", "0.05", "--out", p(&out),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            out.join("best.safetensors")
        };
        let ckpt9 = train("9", "transformer", "nine");
        let ckpt3 = train("3", "conv", "three");
        Fixture {
            data,
            ckpt9,
            ckpt3,
            _root: root,
        }
    })
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gen(&a, "7").status.success());
    assert!(gen(&b, "7").status.success());
    for f in ["dataset.csv", "split.json", "class_balance.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let img = "images/plate_0002.tif";
    assert_eq!(std::fs::read(a.join(img)).unwrap(), std::fs::read(b.join(img)).unwrap());
    let manifest = std::fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
}

#[test]
fn zero_plates_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--n", "0", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_manifest_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nowhere");
    let o = run(&["train", "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&data)), "{}", stderr(&o));
}

#[test]
fn train_writes_artifacts() {
    let f = fixture();
    let dir = f.ckpt9.parent().unwrap();
    for name in [
        "best.safetensors",
        "last.safetensors",
        "history.csv",
        "report.csv",
        "confusion.csv",
        "split.json",
        "run_config.txt",
    ] {
        assert!(dir.join(name).is_file(), "{name}");
    }
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(
        history.lines().next().unwrap(),
        "epoch,box_loss,seg_loss,cls_loss,precision,recall,map50"
    );
}

#[test]
fn config_rerun_is_bit_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = f.ckpt3.parent().unwrap().join("run_config.txt");
    let o = run(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(&f.ckpt3).unwrap(),
        std::fs::read(dir.path().join("best.safetensors")).unwrap()
    );
}

#[test]
fn config_for_another_command_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = f.ckpt3.parent().unwrap().join("run_config.txt");
    let o = run(&["eval", "--config", p(&cfg), "--oracle", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_eval_scores_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--data", p(&f.data), "--oracle", "--subset", "all", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    for line in report.lines().skip(1) {
        for v in line.split(',').skip(1) {
            assert_eq!(v, "1.000000", "{line}");
        }
    }
    let confusion = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    let rows: Vec<Vec<f64>> = confusion
        .lines()
        .filter_map(|l| l.split(',').skip(1).map(|v| v.parse().ok()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn compare_table_has_deltas() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let pair = format!("{},{}", p(&f.ckpt3), p(&f.ckpt9));
    let o = run(&["eval", "--data", p(&f.data), "--compare", &pair, "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "class,iou_three,iou_nine,iou_delta,dice_three,dice_nine,dice_delta"
    );
    let rows: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["normal", "chlorosis", "pigment_accumulation", "tipburn", "mean"]);
    for l in table.lines().skip(1) {
        let v: Vec<f64> = l.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((v[2] - (v[1] - v[0])).abs() <= 0.011, "{l}");
        assert!((v[5] - (v[4] - v[3])).abs() <= 0.011, "{l}");
    }
    assert!(dir.path().join("three_report.csv").is_file());
    assert!(dir.path().join("nine_confusion.png").is_file() || !font_present());
}

fn font_present() -> bool {
    Path::new("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf").exists() || std::env::var_os("SPECTRALEAF_FONT").is_some()
}

#[test]
fn nine_band_checkpoint_on_three_band_data_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let rgb = dir.path().join("rgb");
    std::fs::create_dir_all(rgb.join("images")).unwrap();
    for entry in ["dataset.csv", "split.json", "masks", "annotations"] {
        let from = f.data.join(entry);
        if from.is_dir() {
            std::fs::create_dir_all(rgb.join(entry)).unwrap();
            for file in std::fs::read_dir(&from).unwrap() {
                let file = file.unwrap().path();
                std::fs::copy(&file, rgb.join(entry).join(file.file_name().unwrap())).unwrap();
            }
        } else {
            std::fs::copy(&from, rgb.join(entry)).unwrap();
        }
    }
    for file in std::fs::read_dir(f.data.join("images")).unwrap() {
        let file = file.unwrap().path();
        if file.extension().and_then(|e| e.to_str()) != Some("tif") {
            continue;
        }
        let img = load_image(&file, NormalizeMode::default()).unwrap();
        let out = rgb.join("images").join(file.file_name().unwrap());
        save_image(&out, &extract_rgb(&img).unwrap(), SampleFormat::F32).unwrap();
    }
    let o = run(&["eval", "--data", p(&rgb), "--checkpoint", p(&f.ckpt9), "--out", p(&dir.path().join("ev"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("channel mismatch"), "{}", stderr(&o));

    let ok = run(&["eval", "--data", p(&rgb), "--checkpoint", p(&f.ckpt3), "--out", p(&dir.path().join("ev3"))]);
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn predict_writes_mask_overlay_and_triptych() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let one = f.data.join("images/plate_0000.tif");
    let o = run(&["predict", "--checkpoint", p(&f.ckpt9), "--input", p(&one), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["plate_0000_mask.tif", "plate_0000_overlay.png", "run_config.txt"]);
    let mask = spectraleaf::raster_io::read_mask(&dir.path().join("plate_0000_mask.tif")).unwrap();
    assert_eq!((mask.height, mask.width), (64, 64));

    let tri = tempfile::tempdir().unwrap();
    let glob = format!("{}/images/*.tif", p(&f.data));
    let o = run(&[
        "predict", "--checkpoint", p(&f.ckpt9), "--input", &glob, "--gt", p(&f.data.join("masks")), "--compare",
        p(&f.ckpt3), "--out", p(tri.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..6 {
        let path = tri.path().join(format!("plate_{i:04}_triptych.png"));
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 64 + 2 * 4, 64));
    }
}

#[test]
fn predict_continues_past_bad_files() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    std::fs::create_dir_all(&inputs).unwrap();
    std::fs::copy(f.data.join("images/plate_0001.tif"), inputs.join("good.tif")).unwrap();
    std::fs::copy(f.data.join("images/plate_0001.bands.txt"), inputs.join("good.bands.txt")).unwrap();
    std::fs::write(inputs.join("bad.tif"), b"not a tiff").unwrap();
    let glob = format!("{}/*.tif", p(&inputs));
    let out = dir.path().join("out");
    let o = run(&["predict", "--checkpoint", p(&f.ckpt9), "--input", &glob, "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(out.join("good_overlay.png").is_file());
}

#[test]
fn empty_glob_is_a_usage_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let glob = format!("{}/none/*.tif", p(dir.path()));
    let o = run(&["predict", "--checkpoint", p(&f.ckpt9), "--input", &glob, "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}
