use std::net::SocketAddr;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use terralabel::graphs::Variant;
use terralabel::pipeline::{PipelineConfig, SyntheticConfig};
use terralabel::projection::UmapParams;
use terralabel_service::artifacts::Artifacts;
use terralabel_service::commands::{self, TileSource};
use terralabel_service::server::{missing_artifacts, router, AppState, ServeOptions};

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        chip_size: 64,
        clusters: 4,
        fcm_stride: 4,
        desk_scale: true,
        n_segments: 30,
        k: 4,
        ..PipelineConfig::default()
    };
    cfg.unet.max_epochs = 2;
    cfg.gnn.max_epochs = 3;
    cfg.umap = UmapParams {
        n_neighbors: 5,
        epochs: 50,
        ..UmapParams::default()
    };
    cfg
}

/// Every stage on a 256² synthetic tile: 16 chips of 64 px.
fn build_store(root: &Path) -> Artifacts {
    let cfg = config();
    let source = TileSource::Synthetic(SyntheticConfig {
        size: 256,
        seed: 3,
        ..SyntheticConfig::default()
    });
    commands::ingest(root, source, Some(12), cfg.chip_size).unwrap();
    let art = Artifacts::open(root).unwrap();
    commands::fcm(&art, cfg.clusters, cfg.fcm_stride, cfg.seed).unwrap();
    commands::train_unet(&art, &cfg).unwrap();
    commands::extract(&art, None).unwrap();
    commands::segment(&art, &cfg).unwrap();
    commands::build_graphs(&art, cfg.k).unwrap();
    commands::train_gnn(&art, Variant::Gcn, &cfg).unwrap();
    commands::match_chips(&art, None).unwrap();
    commands::project(&art, None, None, cfg.umap).unwrap();
    art
}

async fn start(root: &Path) -> String {
    let state = AppState::load(
        root,
        ServeOptions {
            bands: [4, 3, 2],
            umap: config().umap,
        },
    )
    .unwrap();
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("http://{addr}")
}

async fn get_json(client: &reqwest::Client, url: &str) -> (u16, Value) {
    let r = client.get(url).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn await_job(client: &reqwest::Client, base: &str, id: u64) -> Value {
    for _ in 0..600 {
        let (status, job) = get_json(client, &format!("{base}/api/jobs/{id}")).await;
        assert_eq!(status, 200);
        if job["status"] != "running" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn api_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let art = Arc::new(tokio::task::spawn_blocking({
        let root = dir.path().to_path_buf();
        move || build_store(&root)
    })
    .await
    .unwrap());
    let base = start(dir.path()).await;
    let client = reqwest::Client::new();
    let ids = art.store.chip_ids();

    // Chip projection: one point per chip, finite coordinates.
    let (status, proj) = get_json(&client, &format!("{base}/api/projection/chips")).await;
    assert_eq!(status, 200);
    let points = proj["points"].as_array().unwrap();
    assert_eq!(points.len(), ids.len());
    assert!(points.iter().all(|p| p["x"].as_f64().unwrap().is_finite() && p["y"].as_f64().unwrap().is_finite()));

    let (_, meta) = get_json(&client, &format!("{base}/api/meta")).await;
    assert_eq!(meta["chips"], 16);
    assert_eq!(meta["embedding"]["variant"], serde_json::to_value(Variant::Gcn).unwrap());
    assert_eq!(meta["labels"], 0);

    // Thumbnails: 256² PNG, byte-identical on repeat, 404 for unknown chips.
    let url = format!("{base}/api/chips/{}/thumbnail.png", ids[0]);
    let a = client.get(&url).send().await.unwrap();
    assert_eq!(a.headers()["content-type"], "image/png");
    let a = a.bytes().await.unwrap();
    let b = client.get(&url).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(a, b);
    assert_eq!(image::load_from_memory(&a).unwrap().to_rgb8().dimensions(), (256, 256));
    let missing = client.get(format!("{base}/api/chips/nope/thumbnail.png")).send().await.unwrap();
    assert_eq!(missing.status().as_u16(), 404);

    // Segment masks cover the chip exactly once.
    let (status, masks) = get_json(&client, &format!("{base}/api/chips/{}/segments", ids[0])).await;
    assert_eq!(status, 200);
    let covered: u64 = masks["segments"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|s| s["runs"].as_array().unwrap().iter().map(|r| r[1].as_u64().unwrap()))
        .sum();
    assert_eq!(covered, 64 * 64);
    let n_segments = masks["segments"].as_array().unwrap().len();

    // Segment projection job, then the same selection served from cache.
    let selection = json!({ "chip_ids": [ids[1], ids[0]] });
    let job: Value = client
        .post(format!("{base}/api/projection/segments"))
        .json(&selection)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let done = await_job(&client, &base, job["job_id"].as_u64().unwrap()).await;
    assert_eq!(done["status"], "done", "{done}");
    let expected: usize = [&ids[0], &ids[1]].iter().map(|id| art.read_embedding(id).unwrap().len()).sum();
    assert_eq!(done["projection"]["points"].as_array().unwrap().len(), expected);
    let again: Value = client
        .post(format!("{base}/api/projection/segments"))
        .json(&json!({ "chip_ids": [ids[0], ids[1]] }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let cached = await_job(&client, &base, again["job_id"].as_u64().unwrap()).await;
    assert_eq!(cached["projection"], done["projection"]);
    let bad = client
        .post(format!("{base}/api/projection/segments"))
        .json(&json!({ "chip_ids": ["nope"] }))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status().as_u16(), 404);
    assert_eq!(client.get(format!("{base}/api/jobs/9999")).send().await.unwrap().status().as_u16(), 404);

    // Labels: invalid records are rejected with per-field errors.
    let invalid = client
        .post(format!("{base}/api/labels"))
        .json(&json!({ "level": "segment", "chip_id": ids[0], "segment_id": n_segments, "label": "", "session": "s" }))
        .send()
        .await
        .unwrap();
    assert_eq!(invalid.status().as_u16(), 422);
    let body: Value = invalid.json().await.unwrap();
    let fields: Vec<&str> = body["records"][0]["errors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["field"].as_str().unwrap())
        .collect();
    assert_eq!(fields, ["segment_id", "label"]);

    let batch = json!([
        { "timestamp": 1000, "level": "segment", "chip_id": ids[0], "segment_id": 0, "label": "water", "session": "s1" },
        { "timestamp": 1001, "level": "segment", "chip_id": ids[0], "segment_id": 1, "label": "urban, dense", "session": "s1" },
        { "timestamp": 1002, "level": "segment", "chip_id": ids[0], "segment_id": 0, "label": "forest", "session": "s1" },
    ]);
    let ok = client.post(format!("{base}/api/labels")).json(&batch).send().await.unwrap();
    assert_eq!(ok.status().as_u16(), 200);
    let chip_label = json!({ "level": "chip", "chip_id": ids[2], "label": "farmland", "session": "s1" });
    assert_eq!(client.post(format!("{base}/api/labels")).json(&chip_label).send().await.unwrap().status().as_u16(), 200);

    let csv = client
        .get(format!("{base}/api/labels/export?format=csv"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[1][4], "urban, dense");
    assert_eq!(&rows[3][3], "");

    // Masks: the later "forest" label wins on segment 0.
    let (_, export) = get_json(&client, &format!("{base}/api/labels/export?format=masks")).await;
    let legend = &export["labels"];
    assert_eq!(export["masks"].as_array().unwrap().len(), 1);
    let png = STANDARD.decode(export["masks"][0]["png_base64"].as_str().unwrap()).unwrap();
    let mask = image::load_from_memory(&png).unwrap().to_luma8();
    let seg = art.read_segments(&ids[0]).unwrap();
    for (p, &l) in seg.labels.iter().enumerate() {
        let want = match l {
            0 => legend["forest"].as_u64().unwrap(),
            1 => legend["urban, dense"].as_u64().unwrap(),
            _ => 0,
        };
        assert_eq!(mask.as_raw()[p] as u64, want, "pixel {p}");
    }
    let raw = client
        .get(format!("{base}/api/labels/export?format=masks&chip={}", ids[0]))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    assert_eq!(raw.as_ref(), png.as_slice());
    let bad_format = client.get(format!("{base}/api/labels/export?format=xml")).send().await.unwrap();
    assert_eq!(bad_format.status().as_u16(), 400);
    let (_, meta) = get_json(&client, &format!("{base}/api/meta")).await;
    assert_eq!(meta["labels"], 4);
}

#[test]
fn refuses_to_start_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let missing = missing_artifacts(dir.path());
    assert_eq!(missing, ["manifest.json", "chips.proj", "sim.simm", "embeddings/model.json"]);
    let err = AppState::load(
        dir.path(),
        ServeOptions {
            bands: [4, 3, 2],
            umap: UmapParams::default(),
        },
    )
    .err()
    .unwrap();
    assert!(err.to_string().contains("chips.proj"));
}

#[test]
fn cli_ingests_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_terralabel"))
            .arg("--store")
            .arg(&store)
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    assert_eq!(run(&["ingest", "--synthetic", "128", "--chip-size", "64"]).trim(), "4 chips");
    assert_eq!(run(&["split"]).trim(), "3 train, 1 test");
    let out = Command::new(env!("CARGO_BIN_EXE_terralabel"))
        .arg("--store")
        .arg(&store)
        .args(["ingest", "--synthetic", "128", "--bands", "4"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
