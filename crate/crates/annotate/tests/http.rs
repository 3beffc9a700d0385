use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use aqpl_annotate::server::{QueueView, TaskView};
use aqpl_annotate::{router, serve, HumanOracle, HumanOracleConfig, Preview, StoreStatus, TaskStore, TimeoutPolicy};
use aqpl_core::dataset::{ImageShape, TripletDataset};
use aqpl_core::oracle::{OracleError, OracleKind, OracleQuery, OracleSpec, PerturbationOracle, SimulatedOracle};
use aqpl_core::{init_triplets, Dataset, Ladder, NoiseFamily};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

fn standard_ladder() -> Ladder {
    Ladder::new(0.0, 0.9, 0.01).unwrap()
}

fn oracle_config(shape: Option<ImageShape>, timeout: Duration, on_timeout: TimeoutPolicy) -> HumanOracleConfig {
    HumanOracleConfig {
        ladder: standard_ladder(),
        family: NoiseFamily::Gaussian,
        image_shape: shape,
        seed: 5,
        timeout,
        on_timeout,
        task_prefix: String::new(),
    }
}

fn image_triplets() -> (TripletDataset, ImageShape) {
    let shape = ImageShape { rows: 4, cols: 4 };
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|k| (0..16).map(|p| ((p + k) % 16) as f64 / 15.0).collect())
        .collect();
    let data = Dataset::from_flat(rows.concat(), vec![0, 1, 0], 2, 16, Some(shape)).unwrap();
    (init_triplets(&data, 0.23).unwrap(), shape)
}

fn query(t: &TripletDataset, index: usize, round: u32) -> OracleQuery {
    OracleQuery {
        index,
        x: t.triplets[index].x.clone(),
        y: t.triplets[index].y,
        current_sigma: t.triplets[index].sigma,
        round,
    }
}

/// Minimal HTTP/1.1 client: one request per connection.
fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let body = body.unwrap_or("");
    let request = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes()).unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let status: u16 = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    let payload = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(payload)
    } else {
        payload.to_string()
    };
    (status, payload)
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

async fn call(store: Arc<TaskStore>, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = router(store).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

fn post_json(body: &str) -> Request<Body> {
    Request::post("/api/annotations")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn publish_one(store: &Arc<TaskStore>) {
    let (t, shape) = image_triplets();
    let previews = aqpl_annotate::render_ladder_previews(
        &t.triplets[0].x,
        standard_ladder().levels(),
        1,
        NoiseFamily::Gaussian,
        Some(shape),
    )
    .unwrap();
    store
        .enqueue(aqpl_annotate::AnnotationTask {
            task_id: "task-0".into(),
            index: 0,
            round: 1,
            ladder: standard_ladder().levels().to_vec(),
            previews,
            current_sigma: 0.23,
            seed: 1,
            status: aqpl_annotate::TaskStatus::Pending,
        })
        .unwrap();
}

#[tokio::test]
async fn queue_lists_pending_tasks_with_previews() {
    let store = Arc::new(TaskStore::new());
    let (status, body) = call(Arc::clone(&store), Request::get("/api/queue").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["tasks"].as_array().unwrap().len(), 0);

    publish_one(&store);
    let (_, body) = call(Arc::clone(&store), Request::get("/api/queue").body(Body::empty()).unwrap()).await;
    let queue: QueueView = serde_json::from_value(body).unwrap();
    assert_eq!(queue.tasks.len(), 1);
    let task: &TaskView = &queue.tasks[0];
    assert_eq!(task.kind, "image");
    assert_eq!(task.ladder.len(), 91);
    assert_eq!(task.previews.len(), 91);
    assert_eq!(task.ladder[23], 0.23);
    assert!(task.previews.iter().all(Option::is_some));
    let png = STANDARD.decode(task.previews[0].as_ref().unwrap()).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[tokio::test]
async fn queue_is_stable_across_fetches() {
    let store = Arc::new(TaskStore::new());
    publish_one(&store);
    let get = || Request::get("/api/queue").body(Body::empty()).unwrap();
    let (_, a) = call(Arc::clone(&store), get()).await;
    let (_, b) = call(Arc::clone(&store), get()).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn submission_errors_map_to_status_codes() {
    let store = Arc::new(TaskStore::new());
    publish_one(&store);
    let (s, body) = call(Arc::clone(&store), post_json(r#"{"task_id":"nope","sigma_star":0.23}"#)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (s, _) = call(Arc::clone(&store), post_json(r#"{"task_id":"task-0","sigma_star":0.235}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, body) = call(Arc::clone(&store), post_json(r#"{"task_id":"task-0""#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());
    let (s, body) = call(Arc::clone(&store), post_json(r#"{"task_id":"task-0","sigma_star":0.23}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, serde_json::json!({"ok": true}));
    let (s, _) = call(Arc::clone(&store), post_json(r#"{"task_id":"task-0","sigma_star":0.23}"#)).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, body) = call(Arc::clone(&store), Request::get("/api/status").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let status: StoreStatus = serde_json::from_value(body).unwrap();
    assert_eq!(status.answered, 1);
    assert_eq!(status.pending, 0);
}

#[test]
fn human_answer_reaches_the_triplet_over_http() {
    let (mut triplets, shape) = image_triplets();
    let store = Arc::new(TaskStore::new());
    let server = serve("127.0.0.1:0".parse().unwrap(), Arc::clone(&store)).unwrap();
    let addr = server.local_addr();

    // Annotator: wait for the task, check the clean rung, choose rung 23.
    let clean = triplets.triplets[1].x.clone();
    let annotator = thread::spawn(move || {
        for _ in 0..600 {
            let (status, body) = http(addr, "GET", "/api/queue", None);
            assert_eq!(status, 200);
            let queue: QueueView = serde_json::from_str(&body).unwrap();
            if let Some(task) = queue.tasks.first() {
                assert_eq!(task.ladder.len(), 91);
                assert_eq!(task.current_sigma, 0.23);
                let png = STANDARD.decode(task.previews[0].as_ref().unwrap()).unwrap();
                let decoder = png::Decoder::new(std::io::Cursor::new(png));
                let mut reader = decoder.read_info().unwrap();
                let mut pixels = vec![0; reader.output_buffer_size().unwrap()];
                let info = reader.next_frame(&mut pixels).unwrap();
                pixels.truncate(info.buffer_size());
                let expected: Vec<u8> = clean.iter().map(|v| (v * 255.0).round() as u8).collect();
                assert_eq!(pixels, expected, "the zero rung must be the clean image");

                let sigma = task.ladder[23];
                let body = format!(r#"{{"task_id":"{}","sigma_star":{}}}"#, task.task_id, sigma);
                assert_eq!(http(addr, "POST", "/api/annotations", Some(&body)).0, 200);
                assert_eq!(http(addr, "POST", "/api/annotations", Some(&body)).0, 409);
                return;
            }
            thread::sleep(Duration::from_millis(50));
        }
        panic!("no task appeared");
    });

    let cfg = oracle_config(Some(shape), Duration::from_secs(60), TimeoutPolicy::Fail);
    let mut oracle = HumanOracle::new(Arc::clone(&store), cfg);
    let answers = oracle.query(&[query(&triplets, 1, 1)]);
    annotator.join().unwrap();

    assert_eq!(answers.len(), 1);
    let sigma = answers[0].result.clone().unwrap();
    assert_eq!(sigma.to_bits(), 0.23f64.to_bits());
    triplets.annotate(1, 1, sigma);
    assert_eq!(triplets.triplets[1].sigma, 0.23);
    assert!(triplets.triplets[1].annotated);

    let (_, body) = http(addr, "GET", "/api/status", None);
    let status: StoreStatus = serde_json::from_str(&body).unwrap();
    assert_eq!((status.round, status.pending, status.answered, status.queries_total), (1, 0, 1, 1));
    server.shutdown().unwrap();
}

#[test]
fn timeout_falls_back_to_simulation_and_flags_it() {
    let (triplets, shape) = image_triplets();
    let store = Arc::new(TaskStore::new());
    let sim = SimulatedOracle::new(OracleSpec {
        kind: OracleKind::AnalyticLinear {
            w: (0..16).map(|p| if p == 0 { 1.0 } else { 0.0 }).collect(),
            b: -0.5,
        },
        tau: 0.9973,
        samples: 1000,
        ladder: standard_ladder(),
        family: NoiseFamily::Gaussian,
        clip: true,
        seed: 0,
    })
    .unwrap();
    let cfg = oracle_config(Some(shape), Duration::from_millis(30), TimeoutPolicy::Simulate(sim));
    let mut oracle = HumanOracle::new(Arc::clone(&store), cfg);
    let answers = oracle.query(&[query(&triplets, 0, 2)]);
    assert_eq!(answers[0].note.as_deref(), Some(aqpl_annotate::human::FALLBACK_NOTE));
    assert!(answers[0].result.is_ok());
    assert!(store.pending().is_empty(), "timed-out tasks are withdrawn");

    let cfg = oracle_config(Some(shape), Duration::from_millis(10), TimeoutPolicy::Fail);
    let mut oracle = HumanOracle::new(Arc::clone(&store), cfg);
    let answers = oracle.query(&[query(&triplets, 0, 3)]);
    assert!(matches!(answers[0].result, Err(OracleError::Unavailable(_))));
}

#[test]
fn non_visual_tasks_carry_numeric_ladders() {
    let data = Dataset::from_rows(vec![vec![0.5, -1.0, 2.0]], vec![0], 2).unwrap();
    let triplets = init_triplets(&data, 0.23).unwrap();
    let store = Arc::new(TaskStore::new());
    let store2 = Arc::clone(&store);
    let annotator = thread::spawn(move || {
        for _ in 0..600 {
            if let Some(task) = store2.pending().first() {
                let view = TaskView::from(task);
                assert_eq!(view.kind, "numeric");
                assert!(view.previews.iter().all(Option::is_none));
                let values = view.values.unwrap();
                assert_eq!(values.len(), 91);
                assert_eq!(values[0], vec![0.5, -1.0, 2.0]);
                assert!(matches!(task.previews[1], Preview::Numeric(_)));
                store2
                    .submit(aqpl_annotate::Annotation {
                        task_id: task.task_id.clone(),
                        sigma_star: 0.9,
                        note: Some("easy".into()),
                        timestamp: 0,
                    })
                    .unwrap();
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        panic!("no task appeared");
    });
    let cfg = oracle_config(None, Duration::from_secs(60), TimeoutPolicy::Fail);
    let mut oracle = HumanOracle::new(store, cfg);
    let answers = oracle.query(&[query(&triplets, 0, 1)]);
    annotator.join().unwrap();
    assert_eq!(answers[0].result, Ok(0.9));
    assert_eq!(answers[0].note.as_deref(), Some("easy"));
}
