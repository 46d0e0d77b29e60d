//! Trusted applications: the server loop every TA runs and the sample TAs.
//!
//! A TA receives `label = command ID, words = [arg]` from the Root Task and
//! replies `label = 0, words = [result]`. TAs that declare a payload buffer
//! additionally get `words[1] = payload length` with the bytes in a buffer
//! shared with the Root Task, and may return output bytes the same way.

use crate::microkernel::{CPtr, KernelError, Message, Received, SharedBuf, TcbRef, PAGE_SIZE};
use crate::runtime::{Actor, Executor, IpcPort, Task, TaskCtx, TaskError, UserMemory};
use crate::security_services::{ServiceClient, ServiceId, ServiceRequest};

pub const DEFAULT_TA_PRIORITY: u8 = 100;
/// Largest payload the Root Task forwards to a TA.
pub const TA_PAYLOAD_MAX: u32 = 64 * 1024 + PAGE_SIZE;

/// Everything a TA was given at creation.
#[derive(Debug, Clone, Copy)]
pub struct TaLayout {
    pub command_id: u32,
    pub data_base: u32,
    pub data_len: u32,
    pub crypto: Option<ServiceClient>,
    pub key_mgmt: Option<ServiceClient>,
    pub payload: Option<SharedBuf>,
}

/// What a TA sees while serving one request.
pub struct TaEnv<'e, 'a> {
    ctx: &'e mut TaskCtx<'a>,
    layout: &'e TaLayout,
    input: Option<Vec<u8>>,
    output: Option<Vec<u8>>,
}

impl<'e, 'a> TaEnv<'e, 'a> {
    pub fn layout(&self) -> &TaLayout {
        self.layout
    }

    pub fn port(&mut self) -> &mut dyn IpcPort {
        &mut *self.ctx
    }

    pub fn ctx(&mut self) -> &mut TaskCtx<'a> {
        self.ctx
    }

    pub fn input(&self) -> Option<&[u8]> {
        self.input.as_deref()
    }

    pub fn set_output(&mut self, bytes: Vec<u8>) {
        self.output = Some(bytes);
    }

    pub fn crypto(&self) -> Result<ServiceClient, TaskError> {
        self.layout.crypto.ok_or(TaskError::Kernel(KernelError::CapMissing))
    }

    pub fn key_mgmt(&self) -> Result<ServiceClient, TaskError> {
        self.layout.key_mgmt.ok_or(TaskError::Kernel(KernelError::CapMissing))
    }

    /// Call a service and return its payload, failing on a non-OK status.
    pub fn service(&mut self, client: ServiceClient, id: ServiceId, payload: Vec<u8>) -> Result<Vec<u8>, TaskError> {
        Ok(client.invoke(&mut *self.ctx, &ServiceRequest::new(id, payload))?)
    }
}

/// Behaviour of a TA: request word in, reply word out.
pub trait TaProgram: Send {
    fn invoke(&mut self, env: &mut TaEnv<'_, '_>, arg: u32) -> Result<u32, TaskError>;
}

impl<F> TaProgram for F
where
    F: FnMut(&mut TaEnv<'_, '_>, u32) -> Result<u32, TaskError> + Send,
{
    fn invoke(&mut self, env: &mut TaEnv<'_, '_>, arg: u32) -> Result<u32, TaskError> {
        self(env, arg)
    }
}

/// Creation request handed to the Root Task.
pub struct TaSpec {
    pub name: &'static str,
    pub program: Box<dyn TaProgram>,
    pub priority: u8,
    pub data_pages: u32,
    pub needs_crypto: bool,
    pub needs_key_mgmt: bool,
    pub payload_buffer: bool,
    /// Command ID reserved for this TA by the platform's provisioning.
    pub reserved_id: Option<u32>,
}

impl TaSpec {
    pub fn new(name: &'static str, program: impl TaProgram + 'static) -> Self {
        Self {
            name,
            program: Box::new(program),
            priority: DEFAULT_TA_PRIORITY,
            data_pages: 1,
            needs_crypto: false,
            needs_key_mgmt: false,
            payload_buffer: false,
            reserved_id: None,
        }
    }

    pub fn priority(mut self, p: u8) -> Self {
        self.priority = p;
        self
    }

    pub fn data_pages(mut self, n: u32) -> Self {
        self.data_pages = n;
        self
    }

    pub fn with_crypto(mut self) -> Self {
        self.needs_crypto = true;
        self
    }

    pub fn with_key_mgmt(mut self) -> Self {
        self.needs_key_mgmt = true;
        self
    }

    pub fn with_payload(mut self) -> Self {
        self.payload_buffer = true;
        self
    }

    pub fn reserved(mut self, id: u32) -> Self {
        self.reserved_id = Some(id);
        self
    }
}

/// The receive / invoke / reply loop shared by every TA.
pub struct TaServer {
    layout: TaLayout,
    program: Box<dyn TaProgram>,
}

impl TaServer {
    pub fn new(layout: TaLayout, program: Box<dyn TaProgram>) -> Self {
        Self { layout, program }
    }

    fn read_input(&self, ctx: &mut TaskCtx<'_>, req: &Received) -> Result<Option<Vec<u8>>, TaskError> {
        let (Some(buf), Some(&len)) = (req.msg.shared_buf, req.msg.words.get(1)) else {
            return Ok(None);
        };
        if Some(buf) != self.layout.payload || len > buf.len {
            return Err(TaskError::Abort("request names a foreign buffer".into()));
        }
        Ok(Some(ctx.read(buf.base, len as usize)?))
    }
}

impl Task for TaServer {
    fn handle(&mut self, ctx: &mut TaskCtx<'_>, req: Received) -> Result<Message, TaskError> {
        let arg = req.msg.words.first().copied().unwrap_or(0);
        let input = self.read_input(ctx, &req)?;
        let mut env = TaEnv {
            ctx,
            layout: &self.layout,
            input,
            output: None,
        };
        let result = self.program.invoke(&mut env, arg)?;
        let output = env.output.take();
        match (output, self.layout.payload) {
            (None, _) => Ok(Message::new(0, vec![result])),
            (Some(out), Some(buf)) if out.len() <= buf.len as usize => {
                ctx.write(buf.base, &out)?;
                Ok(Message::new(0, vec![result, out.len() as u32]).with_shared(buf))
            }
            (Some(_), _) => Err(TaskError::Abort("output does not fit the payload buffer".into())),
        }
    }
}

/// Start serving requests on `endpoint`. Fails if the TA cannot receive on
/// it, in which case the TA is left suspended.
pub fn ta_serve_loop(
    exec: &mut Executor,
    tcb: TcbRef,
    endpoint: CPtr,
    actor: Actor,
    server: TaServer,
) -> Result<(), KernelError> {
    exec.attach(tcb, endpoint, actor, Box::new(server));
    exec.settle(tcb);
    match exec.kernel().tcb(tcb)?.fault {
        Some(crate::microkernel::FaultKind::Capability(e)) => {
            exec.detach(tcb);
            Err(e)
        }
        Some(_) => {
            exec.detach(tcb);
            Err(KernelError::Suspended)
        }
        None => Ok(()),
    }
}

// ---- sample TAs ---------------------------------------------------------

pub const INCREMENT_TA_ID: u32 = 3;
pub const DIGEST_TA_ID: u32 = 1;
pub const SEAL_TA_ID: u32 = 2;

pub fn increment_ta(x: u32) -> u32 {
    x.wrapping_add(1)
}

pub fn increment_spec() -> TaSpec {
    TaSpec::new("increment", |_: &mut TaEnv<'_, '_>, x: u32| Ok(increment_ta(x))).reserved(INCREMENT_TA_ID)
}

/// Hash the payload through the Crypto Service; returns the digest length.
pub fn digest_spec() -> TaSpec {
    TaSpec::new("digest", |env: &mut TaEnv<'_, '_>, _arg: u32| {
        let data = env.input().unwrap_or_default().to_vec();
        let crypto = env.crypto()?;
        let digest = env.service(crypto, ServiceId::Sha256, data)?;
        let n = digest.len() as u32;
        env.set_output(digest);
        Ok(n)
    })
    .with_crypto()
    .with_payload()
    .reserved(DIGEST_TA_ID)
}

/// SHA-256 of `data` from the Crypto Service, then sealed by Key Management.
pub fn crypto_client_ta(env: &mut TaEnv<'_, '_>, data: &[u8]) -> Result<Vec<u8>, TaskError> {
    let crypto = env.crypto()?;
    let km = env.key_mgmt()?;
    let digest = env.service(crypto, ServiceId::Sha256, data.to_vec())?;
    env.service(km, ServiceId::Seal, digest)
}

pub fn crypto_client_spec() -> TaSpec {
    TaSpec::new("crypto-client", |env: &mut TaEnv<'_, '_>, _arg: u32| {
        let data = env.input().unwrap_or_default().to_vec();
        let blob = crypto_client_ta(env, &data)?;
        let n = blob.len() as u32;
        env.set_output(blob);
        Ok(n)
    })
    .with_crypto()
    .with_key_mgmt()
    .with_payload()
    .reserved(SEAL_TA_ID)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increment_wraps() {
        assert_eq!(increment_ta(0), 1);
        assert_eq!(increment_ta(41), 42);
        assert_eq!(increment_ta(u32::MAX), 0);
    }
}
