use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evsforge::camera::{make_evs, read_cameras, write_cameras, CameraRecord, EvsFamily, EvsLevel, EvsSpec};
use evsforge::cli::view_stem;
use evsforge::condition::first_hit;
use evsforge::diffusion::{DenoiseRequest, Denoiser, RemoteDenoiser};
use evsforge::fixture;
use evsforge::fmap::FloatImage;
use evsforge::grid::{save_grid, OccupancyGrid};
use evsforge::gsplat::CheckpointManifest;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_evsforge");

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("EVSFORGE_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_fixture_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    fixture::write_fixture(tmp.path()).unwrap();
    let files = ["grid.occ", "boxes.jsonl", "cameras.jsonl", "config.toml", "views/cam_00000.fmap", "views/cam_00001.fmap"];
    for f in files {
        assert_eq!(fs::read(tmp.path().join(f)).unwrap(), fs::read(fixtures().join(f)).unwrap(), "{f} is stale");
    }
}

#[test]
fn render_conditions_on_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["render-conditions", "--grid", s(&f.join("grid.occ")), "--boxes", s(&f.join("boxes.jsonl")),
             "--cameras", s(&f.join("cameras.jsonl")), "--out", s(out)]);
    }
    let fmaps: Vec<_> = fs::read_dir(&a).unwrap().flatten().filter(|e| e.path().extension().unwrap() == "fmap").collect();
    assert_eq!(fmaps.len(), 2);
    let grid = fixture::grid();
    for (i, cam) in fixture::cameras().iter().enumerate() {
        let name = format!("{}.fmap", view_stem(i));
        let c = FloatImage::load(a.join(&name)).unwrap();
        assert_eq!(c.channels, 13);
        let mut hits = 0;
        for y in 0..c.height {
            for x in 0..c.width {
                let dir = cam.pose.rotation * cam.intr.pixel_ray(x as f64, y as f64);
                let hit = first_hit(&grid, &cam.pose.center(), &dir, grid.diagonal()).is_some();
                assert_eq!(c.get(y, x, 12) != 0.0, hit, "pixel ({x},{y}) of {name}");
                hits += hit as usize;
            }
        }
        assert!(hits > 100);
        for stem in ["", "_S.png", "_D.png"] {
            let f = if stem.is_empty() { name.clone() } else { format!("{}{stem}", view_stem(i)) };
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f} differs between runs");
        }
    }
}

#[test]
fn render_conditions_on_empty_grid_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("empty.occ");
    save_grid(&OccupancyGrid::empty([16, 16, 16], 0.25, Vector3::new(-2.0, 1.0, 0.0)), &grid).unwrap();
    let out = tmp.path().join("c");
    ok(&["render-conditions", "--grid", s(&grid), "--cameras", s(&fixtures().join("cameras.jsonl")), "--out", s(&out)]);
    let c = FloatImage::load(out.join("cam_00000.fmap")).unwrap();
    assert!(c.data.iter().all(|&v| v == 0.0));
}

fn three_cameras(dir: &Path) -> PathBuf {
    let mut cams = fixture::cameras();
    cams.push(CameraRecord { frame: 0, ..cams[0] });
    cams[2].pose.translation.x += 1.0;
    let p = dir.join("three.jsonl");
    write_cameras(&p, &cams).unwrap();
    p
}

#[test]
fn make_evs_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cams_path = three_cameras(tmp.path());
    let cams = read_cameras(&cams_path).unwrap();
    let out = |n: &str| tmp.path().join(n);

    ok(&["make-evs", "--cameras", s(&cams_path), "--family", "D", "--level", "easy", "--out", s(&out("d.jsonl"))]);
    let d = read_cameras(out("d.jsonl")).unwrap();
    assert_eq!(d.len(), 3);
    for (a, b) in cams.iter().zip(&d) {
        let lift = b.pose.translation - a.pose.translation;
        assert!((lift - Vector3::new(0.0, 0.0, 0.2)).norm() < 1e-12);
    }

    ok(&["make-evs", "--cameras", s(&cams_path), "--family", "LR", "--level", "easy", "--yaw", "0", "--out", s(&out("lr0.jsonl"))]);
    assert_eq!(read_cameras(out("lr0.jsonl")).unwrap(), cams);

    ok(&["make-evs", "--cameras", s(&cams_path), "--family", "LR", "--level", "hard", "--out", s(&out("lr.jsonl"))]);
    ok(&["make-evs", "--cameras", s(&out("lr.jsonl")), "--family", "D", "--level", "hard", "--out", s(&out("lr_d.jsonl"))]);
    ok(&["make-evs", "--cameras", s(&cams_path), "--family", "LR-D", "--level", "hard", "--out", s(&out("lrd.jsonl"))]);
    assert_eq!(fs::read(out("lrd.jsonl")).unwrap(), fs::read(out("lr_d.jsonl")).unwrap());

    // Library composition agrees with the files.
    let poses: Vec<_> = cams.iter().map(|c| c.pose).collect();
    let lib = make_evs(&poses, &EvsSpec::new(EvsFamily::LRD, EvsLevel::Hard)).unwrap();
    let file: Vec<_> = read_cameras(out("lrd.jsonl")).unwrap().iter().map(|c| c.pose).collect();
    assert_eq!(lib, file);

    let bad = run(&["make-evs", "--cameras", s(&cams_path), "--family", "LR", "--level", "easy", "--yaw", "50", "--out", s(&out("x"))]);
    assert_eq!(bad.status.code(), Some(2));
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> FloatImage {
    FloatImage::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..0.9)).collect())
}

/// Straight-line SSIM: explicit zero-padded 11×11 Gaussian windows per pixel.
fn ssim_oracle(x: &FloatImage, y: &FloatImage) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g: Vec<f64> = (-5..=5).map(|d: i32| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / sum).collect();
    let (h, w, c) = x.shape();
    let mut total = 0.0;
    for ch in 0..c {
        for py in 0..h as i32 {
            for px in 0..w as i32 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5 {
                    for dx in -5..=5 {
                        let (qy, qx) = (py + dy, px + dx);
                        if qy < 0 || qx < 0 || qy >= h as i32 || qx >= w as i32 {
                            continue;
                        }
                        let wt = g[(dy + 5) as usize] * g[(dx + 5) as usize];
                        let a = x.get(qy as usize, qx as usize, ch);
                        let b = y.get(qy as usize, qx as usize, ch);
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (h * w * c) as f64
}

#[test]
fn eval_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dirs: Vec<PathBuf> = ["gt", "same", "off", "rand"].iter().map(|d| tmp.path().join(d)).collect();
    for d in &dirs {
        fs::create_dir_all(d).unwrap();
    }
    let mut pairs = Vec::new();
    for i in 0..3 {
        let gt = random_image(&mut rng, 16, 12);
        let other = random_image(&mut rng, 16, 12);
        let name = format!("{}.fmap", view_stem(i));
        gt.save(dirs[0].join(&name)).unwrap();
        gt.save(dirs[1].join(&name)).unwrap();
        gt.map(|v| v + 0.1).save(dirs[2].join(&name)).unwrap();
        other.save(dirs[3].join(&name)).unwrap();
        // Files hold f32; score what was stored.
        pairs.push((FloatImage::load(dirs[3].join(&name)).unwrap(), FloatImage::load(dirs[0].join(&name)).unwrap()));
    }
    let report = |d: &Path| -> serde_json::Value {
        let json = tmp.path().join("r.json");
        ok(&["eval", "--renders", s(d), "--gt", s(&dirs[0]), "--out", s(&json)]);
        serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap()
    };
    let same = report(&dirs[1]);
    assert_eq!(same["mean_psnr"].as_f64().unwrap(), 99.0);
    assert!((same["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let off = report(&dirs[2]);
    assert!((off["mean_psnr"].as_f64().unwrap() - 20.0).abs() < 1e-6);
    let rand = report(&dirs[3]);
    for (i, (r, g)) in pairs.iter().enumerate() {
        let mse: f64 = r.data.iter().zip(&g.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.data.len() as f64;
        let v = &rand["views"][i];
        assert!((v["psnr"].as_f64().unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert!((v["ssim"].as_f64().unwrap() - ssim_oracle(r, g)).abs() < 1e-9);
        assert_eq!(v["pixels"].as_u64().unwrap(), 16 * 12);
    }

    fs::remove_file(dirs[3].join("cam_00002.fmap")).unwrap();
    let mismatch = run(&["eval", "--renders", s(&dirs[3]), "--gt", s(&dirs[0])]);
    assert_eq!(mismatch.status.code(), Some(3));
}

fn distill(out: &Path, seed: &str, extra: &[&str]) -> Output {
    let f = fixtures();
    let mut args = vec![
        "distill", "--config", s(&f.join("config.toml")).to_owned().leak(), "--grid", s(&f.join("grid.occ")).to_owned().leak(),
        "--boxes", s(&f.join("boxes.jsonl")).to_owned().leak(), "--cameras", s(&f.join("cameras.jsonl")).to_owned().leak(),
        "--views", s(&f.join("views")).to_owned().leak(), "--denoiser", "toy", "--seed", seed, "--out", s(out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .flatten()
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn distill_smoke_determinism_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for d in [&a, &b] {
        let out = distill(d, "5", &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for sub in ["stage1", "stage2"] {
        assert_eq!(dir_bytes(&a.join(sub)), dir_bytes(&b.join(sub)), "{sub} differs");
    }
    let tel_a = fs::read(a.join("telemetry.jsonl")).unwrap();
    assert_eq!(tel_a, fs::read(b.join("telemetry.jsonl")).unwrap());
    let lines: Vec<serde_json::Value> =
        String::from_utf8(tel_a).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 260);
    assert!(lines.iter().filter(|l| l["stage"] == 1).all(|l| l["vsd_grad_norm"] == 0.0));
    assert!(lines.iter().any(|l| l["stage"] == 2 && l["vsd_grad_norm"].as_f64().unwrap() > 0.0));

    assert!(distill(&c, "6", &[]).status.success());
    assert_ne!(fs::read(a.join("telemetry.jsonl")).unwrap(), fs::read(c.join("telemetry.jsonl")).unwrap());

    // Stage 2 alone resumes from the existing stage-1 checkpoint.
    let out = distill(&a, "5", &["--stage2-only"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(dir_bytes(&a.join("stage2")), dir_bytes(&b.join("stage2")));

    let f = fixtures();
    let renders = tmp.path().join("renders");
    ok(&["export-images", "--checkpoint", s(&a.join("stage1")), "--boxes", s(&f.join("boxes.jsonl")),
         "--cameras", s(&f.join("cameras.jsonl")), "--out", s(&renders)]);
    let json = tmp.path().join("eval.json");
    ok(&["eval", "--renders", s(&renders), "--gt", s(&f.join("views")), "--out", s(&json)]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert!(rep["mean_psnr"].as_f64().unwrap() > 18.0, "{rep}");
}

#[test]
fn stage2_only_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = distill(&tmp.path().join("fresh"), "1", &["--stage2-only"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1 checkpoint"));
}

#[test]
fn init_writes_stage0_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let out = tmp.path().join("init");
    ok(&["init", "--grid", s(&f.join("grid.occ")), "--boxes", s(&f.join("boxes.jsonl")), "--out", s(&out)]);
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.stage, 0);
    assert_eq!(m.total(), fixture::grid().occupied().count());
    assert_eq!(m.counts.instances[&1], 16);

    let pts = tmp.path().join("pts.txt");
    fs::write(&pts, "0 3 1 0.5 0.5 0.5\n0.1 3 1 0.2 0.2 0.2\n").unwrap();
    let out2 = tmp.path().join("init2");
    ok(&["init", "--grid", s(&f.join("grid.occ")), "--points", s(&pts), "--out", s(&out2)]);
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(out2.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.total(), 2);
}

#[test]
fn data_and_usage_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.occ");
    fs::write(&bad, b"NOPE").unwrap();
    let out = run(&["init", "--grid", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(run(&["render-conditions"]).status.code(), Some(2));
    let threads = Command::new(BIN)
        .args(["eval", "--renders", ".", "--gt", "."])
        .env("EVSFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn stdio_denoiser_round_trip() {
    let mut remote = RemoteDenoiser::spawn_stdio(&format!("{BIN} serve-echo")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = FloatImage::from_vec(8, 8, 4, (0..256).map(|_| rng.random_range(-3.0..3.0f32) as f64).collect());
    let cond = FloatImage::zeros(8, 8, 13);
    let req = DenoiseRequest { x_t: &x, t: 0.5, prompt: "p", cond: &cond, camera_tag: None };
    for _ in 0..3 {
        assert_eq!(remote.predict(&req).unwrap(), x);
    }
}
