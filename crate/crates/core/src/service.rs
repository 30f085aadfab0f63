//! Line protocol for serving a [`Registry`] over a stream socket.
//!
//! Requests, one per `\n`-terminated UTF-8 line:
//! `PUT <key> <base64>`, `GET <key>`, `DEL <key>`, `WATCH <prefix> <rev>`.
//! Replies: `OK <rev> [<base64>]`, `ABSENT`, `EVT <PUT|DEL> <rev> <key> <base64>`,
//! `ERR <message>`.
//!
//! `GET` answers with the key's last-modified revision. `DEL` of an absent
//! key answers `ABSENT`. `WATCH` answers `OK <current rev>` and then turns
//! the connection into an event stream; an empty prefix is written as `""`.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::registry::{Registry, Revision, WatchEvent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Put { key: String, value: Vec<u8> },
    Get { key: String },
    Del { key: String },
    Watch { prefix: String, from: Revision },
}

pub fn parse_request(line: &str) -> Result<Request, String> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut parts = line.split(' ');
    let verb = parts.next().unwrap_or_default();
    let args: Vec<&str> = parts.collect();
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("{verb} takes {n} argument(s), got {}", args.len()))
        }
    };
    match verb {
        "PUT" => {
            arity(2)?;
            let value = STANDARD
                .decode(args[1])
                .map_err(|e| format!("bad base64: {e}"))?;
            Ok(Request::Put {
                key: args[0].into(),
                value,
            })
        }
        "GET" => {
            arity(1)?;
            Ok(Request::Get {
                key: args[0].into(),
            })
        }
        "DEL" => {
            arity(1)?;
            Ok(Request::Del {
                key: args[0].into(),
            })
        }
        "WATCH" => {
            arity(2)?;
            let prefix = if args[0] == "\"\"" { "" } else { args[0] };
            let from = args[1]
                .parse()
                .map_err(|_| format!("bad revision {:?}", args[1]))?;
            Ok(Request::Watch {
                prefix: prefix.into(),
                from,
            })
        }
        "" => Err("empty request".into()),
        other => Err(format!("unknown command {other:?}")),
    }
}

pub fn format_event(ev: &WatchEvent) -> String {
    format!(
        "EVT {} {} {} {}",
        ev.kind,
        ev.revision,
        ev.entry.key,
        STANDARD.encode(&ev.entry.value)
    )
}

/// Executes a non-watch request and returns the reply line (without `\n`).
pub fn handle(registry: &mut Registry, req: &Request) -> String {
    let reply = match req {
        Request::Put { key, value } => registry
            .put(key, value.clone())
            .map(|rev| format!("OK {rev}")),
        Request::Get { key } => registry.get_entry(key).map(|e| match e {
            Some(e) => format!("OK {} {}", e.revision, STANDARD.encode(&e.value)),
            None => "ABSENT".into(),
        }),
        Request::Del { key } => registry.delete(key).map(|r| match r {
            Some(rev) => format!("OK {rev}"),
            None => "ABSENT".into(),
        }),
        Request::Watch { .. } => return "ERR WATCH is a streaming request".into(),
    };
    reply.unwrap_or_else(|e| format!("ERR {e}"))
}

/// Parses and executes one line. Convenience for tests and scripting.
pub fn handle_line(registry: &mut Registry, line: &str) -> String {
    match parse_request(line) {
        Ok(req) => handle(registry, &req),
        Err(e) => format!("ERR {e}"),
    }
}

fn serve_connection(stream: TcpStream, registry: Arc<Mutex<Registry>>) -> io::Result<()> {
    let mut out = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        let req = match parse_request(&line) {
            Ok(req) => req,
            Err(e) => {
                writeln!(out, "ERR {e}")?;
                continue;
            }
        };
        if let Request::Watch { prefix, from } = &req {
            let watch = {
                let mut reg = registry.lock().expect("registry lock");
                reg.watch(prefix, *from)
                    .map(|w| (w, reg.current_revision()))
            };
            let (stream, rev) = match watch {
                Ok(w) => w,
                Err(e) => {
                    writeln!(out, "ERR {e}")?;
                    continue;
                }
            };
            writeln!(out, "OK {rev}")?;
            while let Some(ev) = stream.recv() {
                writeln!(out, "{}", format_event(&ev))?;
            }
            return Ok(());
        }
        let reply = handle(&mut registry.lock().expect("registry lock"), &req);
        writeln!(out, "{reply}")?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per client, sharing `registry`.
pub fn serve(listener: TcpListener, registry: Arc<Mutex<Registry>>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let registry = Arc::clone(&registry);
        thread::spawn(move || {
            let _ = serve_connection(stream, registry);
        });
    }
    Ok(())
}

pub fn bind(addr: impl ToSocketAddrs) -> io::Result<TcpListener> {
    TcpListener::bind(addr)
}
