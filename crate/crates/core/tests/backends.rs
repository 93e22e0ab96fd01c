//! Wire protocol against the `serve-mock` binary over both transports.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use attnseg::labels::LabelImage;
use attnseg::prompting::{Point, PointPromptSet};
use attnseg::segment::mock::NO_OBJECT;
use attnseg::segment::wire::SegmentResponse;
use attnseg::segment::{HttpSegmenter, MockSegmenter, SegmentError, Segmenter, SegmenterHandle, SubprocessSegmenter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_attnseg");

fn scene(dir: &Path) -> PathBuf {
    let mut img = LabelImage::new(40, 30);
    img.fill_rect(2, 2, 12, 10, 1);
    img.fill_rect(20, 5, 35, 25, 2);
    img.fill_rect(25, 10, 30, 15, 3);
    let path = dir.join("labels.pgm");
    img.save(&path).unwrap();
    path
}

fn serve_cmd(labels: &Path) -> String {
    format!("'{BIN}' serve-mock --labels '{}'", labels.display())
}

fn random_prompts(rng: &mut impl Rng) -> PointPromptSet {
    let mut pt = || Point {
        x: rng.random_range(0.0..40.0),
        y: rng.random_range(0.0..30.0),
    };
    let pos = pt();
    let neg = pt();
    PointPromptSet::new(vec![pos], vec![neg])
}

fn same(a: Result<Vec<attnseg::ScoredMask>, SegmentError>, b: Result<Vec<attnseg::ScoredMask>, SegmentError>) {
    match (a, b) {
        (Ok(x), Ok(y)) => assert_eq!(x, y),
        (Err(SegmentError::Backend(x)), Err(SegmentError::Backend(y))) => assert_eq!(x, y),
        (x, y) => panic!("{x:?} vs {y:?}"),
    }
}

#[test]
fn subprocess_pool_matches_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    let labels = scene(dir.path());
    let local = MockSegmenter::load(&labels).unwrap();
    let remote = SubprocessSegmenter::spawn(&serve_cmd(&labels), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let p = random_prompts(&mut rng);
        same(local.segment_raw("img", &p), remote.segment_raw("img", &p));
    }
}

#[test]
fn subprocess_serves_parallel_callers() {
    let dir = tempfile::tempdir().unwrap();
    let labels = scene(dir.path());
    let local = MockSegmenter::load(&labels).unwrap();
    let remote = SubprocessSegmenter::spawn(&serve_cmd(&labels), 2).unwrap();
    std::thread::scope(|s| {
        for t in 0..4 {
            let (local, remote) = (&local, &remote);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                for _ in 0..50 {
                    let p = random_prompts(&mut rng);
                    same(local.segment_raw("img", &p), remote.segment_raw("img", &p));
                }
            });
        }
    });
}

#[test]
fn backend_rejection_arrives_as_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let labels = scene(dir.path());
    let seg = SegmenterHandle::from_spec(&format!("exec:{}", serve_cmd(&labels)), 1).unwrap();
    let p = PointPromptSet::new(vec![Point { x: 0.5, y: 0.5 }], vec![]);
    match seg.segment_raw("img", &p) {
        Err(SegmentError::Backend(msg)) => assert_eq!(msg, NO_OBJECT),
        other => panic!("{other:?}"),
    }
}

#[test]
fn crop_references_reach_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let labels = scene(dir.path());
    let seg = SubprocessSegmenter::spawn(&serve_cmd(&labels), 1).unwrap();
    let p = PointPromptSet::new(vec![Point { x: 2.5, y: 2.5 }], vec![]);
    let masks = seg.segment_raw("img#crop=20,5,20,20", &p).unwrap();
    assert_eq!((masks[0].mask.width, masks[0].mask.height), (20, 20));
    // label 2 is a 15x20 block at the crop origin around a 5x5 label-3 hole
    assert_eq!(masks[0].mask.area(), 15 * 20 - 5 * 5);
}

#[test]
fn dead_child_is_a_transport_error() {
    let seg = SubprocessSegmenter::spawn("exit 0", 1).unwrap();
    let p = PointPromptSet::new(vec![Point { x: 1.0, y: 1.0 }], vec![]);
    assert!(matches!(seg.segment_raw("img", &p), Err(SegmentError::Transport(_))));
}

fn spawn_stdio(labels: &Path) -> Child {
    Command::new(BIN)
        .args(["serve-mock", "--labels"])
        .arg(labels)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap()
}

#[test]
fn golden_exchange() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = LabelImage::new(4, 2);
    img.fill_rect(1, 0, 3, 2, 5);
    let labels = dir.path().join("l.pgm");
    img.save(&labels).unwrap();
    let mut child = spawn_stdio(&labels);
    let mut stdin = child.stdin.take().unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut ask = |line: &str| {
        writeln!(stdin, "{line}").unwrap();
        let mut resp = String::new();
        out.read_line(&mut resp).unwrap();
        resp
    };
    assert_eq!(
        ask(r#"{"id":7,"image":"x.png","points":[{"x":1.5,"y":0.5,"positive":true}],"mask_prompt":null,"multimask":false}"#),
        "{\"id\":7,\"masks\":[{\"width\":4,\"height\":2,\"rle\":[1,2,2,2,1],\"score\":1.0}]}\n"
    );
    assert_eq!(
        ask(r#"{"id":8,"image":"x.png","points":[{"x":0.5,"y":0.5,"positive":true}],"mask_prompt":null,"multimask":false}"#),
        format!("{{\"id\":8,\"error\":\"{NO_OBJECT}\"}}\n")
    );
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn malformed_lines_never_kill_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let labels = scene(dir.path());
    let mut child = spawn_stdio(&labels);
    let mut stdin = child.stdin.take().unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let valid = r#"{"id":5,"image":"i","points":[{"x":3.0,"y":3.0,"positive":true}],"mask_prompt":null,"multimask":false}"#;
    for i in 0..1000 {
        let line: String = match i % 4 {
            0 => (0..rng.random_range(1..40)).map(|_| rng.random_range(b' '..=b'~') as char).collect(),
            1 => {
                let cut = rng.random_range(1..valid.len());
                valid[..cut].to_owned()
            }
            2 => format!(r#"{{"id":{i},"image":"i","points":"nope","mask_prompt":null,"multimask":false}}"#),
            _ => format!(
                r#"{{"id":{i},"image":"i","points":[{{"x":-1.0,"y":2.0,"positive":true}}],"mask_prompt":{{"width":1,"height":1,"rle":[3]}},"multimask":false}}"#
            ),
        };
        if line.trim().is_empty() {
            continue;
        }
        writeln!(stdin, "{line}").unwrap();
        let mut resp = String::new();
        out.read_line(&mut resp).unwrap();
        match SegmentResponse::parse(&resp).unwrap() {
            SegmentResponse::Error { id, .. } => {
                if i % 4 >= 2 {
                    assert_eq!(id, i as u64);
                }
            }
            other => panic!("line {i} {line:?} answered with {other:?}"),
        }
    }
    writeln!(stdin, "{valid}").unwrap();
    let mut resp = String::new();
    out.read_line(&mut resp).unwrap();
    assert!(matches!(SegmentResponse::parse(&resp).unwrap(), SegmentResponse::Masks { id: 5, .. }));
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

struct HttpServer(Child, String);

impl Drop for HttpServer {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_http(labels: &Path) -> HttpServer {
    let mut child = Command::new(BIN)
        .args(["serve-mock", "--http", "127.0.0.1:0", "--labels"])
        .arg(labels)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_owned();
    HttpServer(child, format!("http://{addr}"))
}

#[test]
fn http_matches_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    let labels = scene(dir.path());
    let server = spawn_http(&labels);
    let local = MockSegmenter::load(&labels).unwrap();
    let remote = HttpSegmenter::new(&server.1);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let p = random_prompts(&mut rng);
        same(local.segment_raw("img", &p), remote.segment_raw("img", &p));
    }
}

#[test]
fn unreachable_http_is_a_transport_error() {
    let seg = HttpSegmenter::new("http://127.0.0.1:1");
    let p = PointPromptSet::new(vec![Point { x: 1.0, y: 1.0 }], vec![]);
    assert!(matches!(seg.segment_raw("img", &p), Err(SegmentError::Transport(_))));
}
