//! Denoisers served by a separate process.
//!
//! The child is spawned once and kept alive. For every call the library
//! writes the input field as an f64 PMF1 file and sends one request line on
//! the child's stdin:
//!
//! ```text
//! <input path>\t<noise scalar>\t<output path>\n
//! ```
//!
//! The noise scalar is `sigma` when the child is a full denoiser and
//! `c_noise` when it is a raw model wrapped in EDM preconditioning. The child
//! writes its result to the output path as a PMF1 file of the same shape and
//! answers with a line `ok`; any other line is reported as an error. Closing
//! stdin asks the child to exit.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::field::{Dims, Field3};
use crate::pmf::{read_field, write_field, Dtype};

use super::edm::RawModel;
use super::Denoiser;

struct Channel {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    calls: u64,
}

pub struct ExternalDenoiser {
    dims: Dims,
    channels: usize,
    dir: tempfile::TempDir,
    io: Mutex<Channel>,
}

impl std::fmt::Debug for ExternalDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDenoiser")
            .field("dims", &self.dims)
            .field("channels", &self.channels)
            .finish()
    }
}

impl ExternalDenoiser {
    pub fn spawn(command: &str, args: &[String], dims: Dims, channels: usize) -> Result<Self> {
        dims.validate()?;
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Denoiser(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(ExternalDenoiser {
            dims,
            channels,
            dir: tempfile::tempdir()?,
            io: Mutex::new(Channel {
                child,
                stdin,
                stdout,
                calls: 0,
            }),
        })
    }

    fn call(&self, x: &Field3, scalar: f64) -> Result<Field3> {
        if x.dims() != self.dims || x.channels() != self.channels {
            return Err(Error::DimMismatch(format!(
                "external denoiser serves {} channels on {}, got {} on {}",
                self.channels,
                self.dims,
                x.channels(),
                x.dims()
            )));
        }
        let mut io = self
            .io
            .lock()
            .map_err(|_| Error::Denoiser("external denoiser channel poisoned".into()))?;
        io.calls += 1;
        let input: PathBuf = self.dir.path().join(format!("in-{}.pmf", io.calls));
        let output: PathBuf = self.dir.path().join(format!("out-{}.pmf", io.calls));
        write_field(&input, x, Dtype::F64)?;
        let line = format!("{}\t{:e}\t{}\n", input.display(), scalar, output.display());
        let stdin = io
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Denoiser("external denoiser stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Denoiser(format!("cannot send request: {e}")))?;
        let mut reply = String::new();
        let n = io
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Denoiser(format!("cannot read reply: {e}")))?;
        let _ = std::fs::remove_file(&input);
        if n == 0 {
            return Err(Error::Denoiser("external denoiser exited".into()));
        }
        if reply.trim_end() != "ok" {
            return Err(Error::Denoiser(format!(
                "external denoiser replied {:?}",
                reply.trim_end()
            )));
        }
        let out = read_field(&output)?;
        let _ = std::fs::remove_file(&output);
        if !out.same_shape(x) {
            return Err(Error::Denoiser(format!(
                "external denoiser returned {} channels on {}",
                out.channels(),
                out.dims()
            )));
        }
        Ok(out)
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            io.stdin.take();
            let _ = io.child.wait();
        }
    }
}

impl Denoiser for ExternalDenoiser {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn denoise(&self, x: &Field3, sigma: f64) -> Result<Field3> {
        self.call(x, sigma)
    }
}

impl RawModel for ExternalDenoiser {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn predict(&self, x: &Field3, c_noise: f64) -> Result<Field3> {
        self.call(x, c_noise)
    }
}
