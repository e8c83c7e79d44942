//! Log records go to stderr and, while a pipeline stage runs, to that
//! stage's log file as well.

use std::fs::File;
use std::io::{self, Write};
use std::sync::Mutex;

static STAGE_SINK: Mutex<Option<File>> = Mutex::new(None);

struct Tee;

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if let Some(f) = STAGE_SINK.lock().expect("log sink").as_mut() {
            f.write_all(buf)?;
        }
        io::stderr().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = STAGE_SINK.lock().expect("log sink").as_mut() {
            f.flush()?;
        }
        io::stderr().flush()
    }
}

/// Installs the global logger at `info` unless `RUST_LOG` says otherwise.
/// Later calls are no-ops.
pub fn init(verbose: bool) {
    let default = if verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .target(env_logger::Target::Pipe(Box::new(Tee)))
        .format_timestamp_millis()
        .try_init();
}

/// Copies log records into `file` until the returned guard drops.
pub(crate) fn capture(file: File) -> CaptureGuard {
    *STAGE_SINK.lock().expect("log sink") = Some(file);
    CaptureGuard
}

pub(crate) struct CaptureGuard;

impl CaptureGuard {
    /// Writes a line straight to the stage log, whether or not a logger is
    /// installed.
    pub fn line(&self, msg: &str) {
        if let Some(f) = STAGE_SINK.lock().expect("log sink").as_mut() {
            let _ = writeln!(f, "{msg}");
        }
    }
}

impl Drop for CaptureGuard {
    fn drop(&mut self) {
        if let Some(mut f) = STAGE_SINK.lock().expect("log sink").take() {
            let _ = f.flush();
        }
    }
}
