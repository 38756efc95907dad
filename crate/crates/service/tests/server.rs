use std::time::Duration;

use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::time::{timeout, Instant};

use bronchosteer::anatomy::{generate_scene, SceneParams};
use bronchosteer::engine::{replay, DeploymentRecord};
use bronchosteer_service::{serve, ServerConfig};

const RTF: f64 = 50.0;

async fn start(config: ServerConfig) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(serve(listener, config));
    addr
}

fn fast() -> ServerConfig {
    ServerConfig {
        rtf: RTF,
        ..ServerConfig::default()
    }
}

struct Client {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

impl Client {
    async fn connect(addr: &str) -> Self {
        let (read, write) = TcpStream::connect(addr).await.unwrap().into_split();
        Self {
            lines: BufReader::new(read).lines(),
            write,
        }
    }

    async fn send(&mut self, mut msg: Value) {
        msg["v"] = json!(1);
        let mut line = msg.to_string();
        line.push('\n');
        self.write.write_all(line.as_bytes()).await.unwrap();
    }

    async fn recv(&mut self) -> Value {
        let line = timeout(Duration::from_secs(60), self.lines.next_line())
            .await
            .expect("server went quiet")
            .unwrap()
            .expect("connection closed");
        serde_json::from_str(&line).unwrap()
    }

    /// Reads until a message of type `kind` arrives, returning it and
    /// everything before it.
    async fn until(&mut self, kind: &str) -> (Value, Vec<Value>) {
        let mut before = Vec::new();
        loop {
            let m = self.recv().await;
            if m["type"] == kind {
                return (m, before);
            }
            before.push(m);
        }
    }

    async fn request(&mut self, msg: Value, reply: &str) -> Value {
        self.send(msg).await;
        self.until(reply).await.0
    }

    /// Loads a scene and aims until aligned; returns the session id.
    async fn aligned(&mut self, seed: u64) -> String {
        self.send(json!({"type":"load_scene","scene":{"generate":{"seed":1}},"seed":seed}))
            .await;
        let (hello, _) = self.until("session").await;
        self.until("scene_loaded").await;
        self.request(json!({"type":"request_plans"}), "plans").await;
        self.request(json!({"type":"select_plan","index":0}), "plan_selected")
            .await;
        for _ in 0..20 {
            let a = self.request(json!({"type":"query_alignment"}), "alignment").await;
            if a["aligned"] == true {
                return hello["session_id"].as_str().unwrap().to_string();
            }
            let c = &a["correction"];
            self.request(json!({"type":"aim","yaw":c[0],"pitch":c[1]}), "aimed")
                .await;
        }
        panic!("never aligned");
    }
}

fn scene() -> bronchosteer::anatomy::Scene {
    generate_scene(1, &SceneParams::default()).unwrap()
}

fn assert_gated(ticks: &[&Value]) {
    for t in ticks {
        assert!(
            t["insert_v"].as_f64().unwrap() == 0.0 || t["window_open"] == true,
            "insertion outside a window: {t}"
        );
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn live_session_streams_at_the_real_time_factor() {
    let addr = start(fast()).await;
    let mut c = Client::connect(&addr).await;
    c.aligned(11).await;
    c.send(json!({"type":"start_autonomous","id":"go"})).await;
    let began = Instant::now();
    let (done, stream) = c.until("done").await;
    let wall = began.elapsed().as_secs_f64();
    assert_eq!(done["outcome"]["kind"], "completed");

    let ticks: Vec<&Value> = stream.iter().filter(|m| m["type"] == "tick").collect();
    assert!(ticks.len() > 200);
    assert_gated(&ticks);
    for w in ticks.windows(2) {
        assert!(w[1]["t"].as_f64() > w[0]["t"].as_f64());
    }
    let sim = ticks.last().unwrap()["t"].as_f64().unwrap();
    assert!(wall >= 0.9 * sim / RTF, "{sim} s simulated in {wall} s");

    let rec = c.request(json!({"type":"get_record"}), "record").await;
    let rec: DeploymentRecord = serde_json::from_value(rec["record"].clone()).unwrap();
    assert_eq!(replay(&scene(), &rec).unwrap(), rec);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_survive_a_dropped_connection() {
    let addr = start(fast()).await;
    let mut c = Client::connect(&addr).await;
    let id = c.aligned(12).await;
    c.send(json!({"type":"start_autonomous"})).await;
    let (first, _) = c.until("tick").await;
    drop(c);
    tokio::time::sleep(Duration::from_millis(300)).await;

    let mut c = Client::connect(&addr).await;
    c.send(json!({"type":"resume","session_id":id,"id":"again"})).await;
    let hello = c.recv().await;
    assert_eq!(hello["type"], "session");
    assert_eq!(hello["resumed"], true);
    assert_eq!(hello["id"], "again");
    let snap = c.recv().await;
    assert_eq!(snap["type"], "snapshot");
    assert!(
        snap["t"].as_f64() > first["t"].as_f64(),
        "clock kept running while detached"
    );

    let (done, stream) = c.until("done").await;
    assert_eq!(done["outcome"]["kind"], "completed");
    assert_gated(&stream.iter().filter(|m| m["type"] == "tick").collect::<Vec<_>>());
    let rec = c.request(json!({"type":"get_record"}), "record").await;
    let rec: DeploymentRecord = serde_json::from_value(rec["record"].clone()).unwrap();
    assert_eq!(replay(&scene(), &rec).unwrap(), rec);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_are_isolated() {
    let addr = start(fast()).await;
    let mut a = Client::connect(&addr).await;
    let mut b = Client::connect(&addr).await;
    let (ida, idb) = tokio::join!(a.aligned(13), b.aligned(14));
    assert_ne!(ida, idb);
    a.send(json!({"type":"start_autonomous"})).await;
    a.until("tick").await;
    let aborted = a.request(json!({"type":"abort","reason":"test"}), "stage").await;
    assert_eq!(aborted["stage"], "aborted");

    let snap = b.request(json!({"type":"get_snapshot"}), "snapshot").await;
    assert_eq!(snap["stage"], "aligned");
    assert_eq!(snap["t"], 0.0);
    b.send(json!({"type":"start_autonomous"})).await;
    let (tick, _) = b.until("tick").await;
    assert_eq!(tick["segment"], 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn time_stands_still_outside_steering() {
    let addr = start(fast()).await;
    let mut c = Client::connect(&addr).await;
    c.aligned(15).await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let snap = c.request(json!({"type":"get_snapshot"}), "snapshot").await;
    assert_eq!(snap["t"], 0.0);
    assert_eq!(snap["stage"], "aligned");
    let e = c.request(json!({"type":"request_hold","id":3}), "error").await;
    assert_eq!(e["code"], "out_of_order");
    assert_eq!(e["id"], 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn detached_sessions_expire() {
    let addr = start(ServerConfig {
        rtf: RTF,
        session_ttl: Duration::from_millis(100),
    })
    .await;
    let mut c = Client::connect(&addr).await;
    c.send(json!({"type":"get_snapshot"})).await;
    let hello = c.recv().await;
    let id = hello["session_id"].as_str().unwrap().to_string();
    c.recv().await;
    drop(c);
    tokio::time::sleep(Duration::from_millis(500)).await;
    let mut c = Client::connect(&addr).await;
    let e = c.request(json!({"type":"resume","session_id":id}), "error").await;
    assert_eq!(e["code"], "unknown_session");
    let e = c
        .request(json!({"type":"resume","session_id":"missing"}), "error")
        .await;
    assert_eq!(e["code"], "unknown_session");
}

#[tokio::test]
async fn nonpositive_rate_is_rejected() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let config = ServerConfig {
        rtf: 0.0,
        ..ServerConfig::default()
    };
    assert!(serve(listener, config).await.is_err());
}
