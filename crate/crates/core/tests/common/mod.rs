#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use tabicl::inference::RawResponse;
use tabicl::prompt::{
    build_prompt, InstructionSet, PriorAnswer, PromptFormat, PromptInputs, RenderedPrompt, SerializationTemplate,
    Shots, Structure, Variant,
};
use tabicl::split::{ContextExample, ContextSet};
use tabicl::table::{load_table, write_table, FeatureTable, Schema};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn toy_table() -> FeatureTable {
    let schema = Schema::from_json(&fs::read_to_string(fixture("toy_schema.json")).unwrap()).unwrap();
    load_table(fs::File::open(fixture("toy.csv")).unwrap(), &schema).unwrap()
}

/// Writes `table` and its schema into `dir`, returning (table, schema) paths.
pub fn write_dataset(table: &FeatureTable, dir: &Path) -> (PathBuf, PathBuf) {
    let t = dir.join("cohort.csv");
    let s = dir.join("schema.json");
    let mut buf = Vec::new();
    write_table(table, &mut buf).unwrap();
    fs::write(&t, buf).unwrap();
    fs::write(&s, table.schema().to_json()).unwrap();
    (t, s)
}

pub fn context(table: &FeatureTable, target: &str, ids: &[&str]) -> ContextSet {
    ContextSet {
        target_id: target.to_string(),
        k: ids.len(),
        source_pool: "pool_test".into(),
        examples: ids
            .iter()
            .map(|id| ContextExample {
                subject_id: id.to_string(),
                label: table.label_of(id).unwrap(),
            })
            .collect(),
    }
}

/// The exemplar prompt for one of the twelve formats: target P11 (which has
/// a missing cell), three fixed context subjects, narrative serialization.
pub fn exemplar_prompt(format: PromptFormat) -> RenderedPrompt {
    let table = toy_table();
    let instructions = InstructionSet::builtin();
    let template = SerializationTemplate::builtin_narrative();
    let ctx = match format.shots {
        Shots::Zero => ContextSet::empty("P11"),
        Shots::Few => context(&table, "P11", &["P02", "P07", "P10"]),
    };
    let inputs = PromptInputs {
        table: &table,
        target_id: "P11",
        context: &ctx,
        instructions: &instructions,
        template: (format.structure == Structure::Serialized).then_some(&template),
    };
    let prior = PriorAnswer {
        text: "1".into(),
        label: 1,
        reasoning: None,
        base_variant: Variant::Standard,
    };
    build_prompt(&inputs, format, (format.variant == Variant::ReflectionRound).then_some(&prior)).unwrap()
}

pub fn golden_name(format: PromptFormat) -> String {
    format!("golden/{format}.json")
}

pub fn raw(text: &str) -> RawResponse {
    RawResponse::text(text)
}

pub mod server {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread;
    use std::time::Duration;

    pub struct Recorded {
        pub bodies: Mutex<Vec<Vec<u8>>>,
        pub auth: Mutex<Vec<Option<String>>>,
        pub in_flight: AtomicUsize,
        pub max_in_flight: AtomicUsize,
    }

    pub struct Server {
        pub url: String,
        pub recorded: Arc<Recorded>,
    }

    pub fn completion(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 1}
        })
        .to_string()
    }

    fn read_request(stream: &mut TcpStream) -> Option<(Vec<u8>, Option<String>)> {
        let mut reader = BufReader::new(stream.try_clone().ok()?);
        let mut len = 0usize;
        let mut auth = None;
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        if line.is_empty() {
            return None;
        }
        loop {
            line.clear();
            reader.read_line(&mut line).ok()?;
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            let (k, v) = l.split_once(':')?;
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().ok()?,
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).ok()?;
        Some((body, auth))
    }

    fn respond(stream: &mut TcpStream, status: u16, body: &str) {
        let reason = match status {
            200 => "OK",
            429 => "Too Many Requests",
            500 => "Internal Server Error",
            _ => "Status",
        };
        let _ = write!(
            stream,
            "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let _ = stream.flush();
    }

    /// Answers requests in order with `(status, body)`; the last entry
    /// repeats. Each connection is served on its own thread after `delay`.
    pub fn scripted(script: Vec<(u16, String)>, delay: Duration) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let recorded = Arc::new(Recorded {
            bodies: Mutex::new(Vec::new()),
            auth: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        });
        let rec = recorded.clone();
        let next = Arc::new(AtomicUsize::new(0));
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let rec = rec.clone();
                let next = next.clone();
                let script = script.clone();
                thread::spawn(move || {
                    let Some((body, auth)) = read_request(&mut stream) else { return };
                    let now = rec.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    rec.max_in_flight.fetch_max(now, Ordering::SeqCst);
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    rec.bodies.lock().unwrap().push(body);
                    rec.auth.lock().unwrap().push(auth);
                    thread::sleep(delay);
                    let (status, text) = &script[i.min(script.len() - 1)];
                    rec.in_flight.fetch_sub(1, Ordering::SeqCst);
                    respond(&mut stream, *status, text);
                });
            }
        });
        Server { url, recorded }
    }
}
