//! Line-oriented wire protocol for serving episodes from another process.
//!
//! Every message is one JSON object on its own line, tagged by `kind`. The
//! client sends `hello`, `reset`, `step` and `bye`; the server answers each
//! request with exactly one of `hello`, `observation`, `outcome`, `error` or
//! `bye`. The field-by-field schema lives in `docs/protocol.md`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::{ActionChoice, CropState, Environment, StepInfo, StepOutcome, N_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireInfo {
    pub yield_kg_ha: f64,
    pub nitrate_leached: f64,
    pub nitrogen_applied: f64,
    pub irrigation_applied: f64,
}

impl From<&StepInfo> for WireInfo {
    fn from(i: &StepInfo) -> Self {
        Self {
            yield_kg_ha: i.yield_kg_ha,
            nitrate_leached: i.nitrate_leached,
            nitrogen_applied: i.nitrogen_applied,
            irrigation_applied: i.irrigation_applied,
        }
    }
}

impl From<&WireInfo> for StepInfo {
    fn from(i: &WireInfo) -> Self {
        Self {
            yield_kg_ha: i.yield_kg_ha,
            nitrate_leached: i.nitrate_leached,
            nitrogen_applied: i.nitrogen_applied,
            irrigation_applied: i.irrigation_applied,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvMessage {
    Hello {
        version: u32,
    },
    Reset {
        seed: u64,
    },
    Step {
        action: usize,
        /// Replacement (temperature, rainfall) for the simulated day.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weather: Option<[f64; 2]>,
    },
    Observation {
        values: Vec<f64>,
    },
    Outcome {
        values: Vec<f64>,
        reward: f64,
        done: bool,
        info: WireInfo,
    },
    Error {
        message: String,
    },
    Bye,
}

impl EnvMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            EnvMessage::Hello { .. } => "hello",
            EnvMessage::Reset { .. } => "reset",
            EnvMessage::Step { .. } => "step",
            EnvMessage::Observation { .. } => "observation",
            EnvMessage::Outcome { .. } => "outcome",
            EnvMessage::Error { .. } => "error",
            EnvMessage::Bye => "bye",
        }
    }

    fn check_schema(&self) -> Result<()> {
        match self {
            EnvMessage::Observation { values } | EnvMessage::Outcome { values, .. } if values.len() != OBS_DIM => {
                Err(Error::Schema(format!(
                    "{} carries {} values, expected {OBS_DIM}",
                    self.kind(),
                    values.len()
                )))
            }
            EnvMessage::Step { action, .. } if *action >= N_ACTIONS => {
                Err(Error::Schema(format!("action {action} out of range 0..{N_ACTIONS}")))
            }
            _ => Ok(()),
        }
    }
}

/// One newline-terminated line.
pub fn encode(msg: &EnvMessage) -> Result<String> {
    msg.check_schema()?;
    let mut line = serde_json::to_string(msg)?;
    line.push('\n');
    Ok(line)
}

pub fn decode(line: &str) -> Result<EnvMessage> {
    let text = line.trim_end_matches(['\n', '\r']);
    let msg: EnvMessage = serde_json::from_str(text).map_err(|e| Error::Protocol {
        message: e.to_string(),
        line: text.chars().take(200).collect(),
    })?;
    msg.check_schema()?;
    Ok(msg)
}

/// Bidirectional stream of lines.
pub trait LineTransport: Send {
    fn send(&mut self, line: &str) -> Result<()>;

    /// Next line without its terminator; `None` once the peer has closed.
    fn recv(&mut self) -> Result<Option<String>>;
}

fn recv_with_timeout(rx: &Receiver<String>, timeout: Duration) -> Result<Option<String>> {
    match rx.recv_timeout(timeout) {
        Ok(line) => Ok(Some(line)),
        Err(RecvTimeoutError::Disconnected) => Ok(None),
        Err(RecvTimeoutError::Timeout) => Err(Error::Session(format!("no reply within {timeout:?}"))),
    }
}

/// In-process transport; see [`channel_pair`].
pub struct ChannelTransport {
    tx: Sender<String>,
    rx: Receiver<String>,
    timeout: Duration,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    (
        ChannelTransport {
            tx: atx,
            rx: arx,
            timeout: DEFAULT_TIMEOUT,
        },
        ChannelTransport {
            tx: btx,
            rx: brx,
            timeout: DEFAULT_TIMEOUT,
        },
    )
}

impl ChannelTransport {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl LineTransport for ChannelTransport {
    fn send(&mut self, line: &str) -> Result<()> {
        self.tx
            .send(line.trim_end_matches('\n').to_string())
            .map_err(|_| Error::Session("peer disconnected".into()))
    }

    fn recv(&mut self) -> Result<Option<String>> {
        recv_with_timeout(&self.rx, self.timeout)
    }
}

/// Talks to a child process over its standard streams.
pub struct ChildTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    rx: Receiver<String>,
    timeout: Duration,
}

impl ChildTransport {
    /// Launches `argv[0]` with the remaining arguments.
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("empty command line for external environment".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout was piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(|l| l.ok()) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            rx,
            timeout,
        })
    }
}

impl LineTransport for ChildTransport {
    fn send(&mut self, line: &str) -> Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Session("child stdin closed".into()))?;
        let r = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
        r.map_err(|e| Error::Session(format!("write to child failed: {e}")))
    }

    fn recv(&mut self) -> Result<Option<String>> {
        recv_with_timeout(&self.rx, self.timeout)
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// The current process's stdin/stdout, for the serving side.
pub struct StdioTransport {
    input: std::io::Stdin,
    out: std::io::Stdout,
}

impl StdioTransport {
    pub fn new() -> Self {
        Self {
            input: std::io::stdin(),
            out: std::io::stdout(),
        }
    }
}

impl Default for StdioTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl LineTransport for StdioTransport {
    fn send(&mut self, line: &str) -> Result<()> {
        let mut out = self.out.lock();
        out.write_all(line.as_bytes())?;
        out.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<String>> {
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        Ok(Some(line.trim_end_matches(['\n', '\r']).to_string()))
    }
}

/// Client side: an [`Environment`] backed by a protocol peer.
pub struct RemoteEnv<T: LineTransport> {
    transport: T,
    /// Set when an episode broke mid-way; cleared by a successful reset.
    invalid: bool,
    /// Weather override carried by the next `step`.
    pending_weather: Option<[f64; 2]>,
}

impl<T: LineTransport> RemoteEnv<T> {
    /// Performs the version handshake.
    pub fn connect(transport: T) -> Result<Self> {
        let mut env = Self {
            transport,
            invalid: true,
            pending_weather: None,
        };
        match env.request(&EnvMessage::Hello {
            version: PROTOCOL_VERSION,
        }) {
            Ok(EnvMessage::Hello { version }) if version == PROTOCOL_VERSION => Ok(env),
            Ok(EnvMessage::Hello { version }) => Err(Error::Handshake(format!(
                "peer speaks version {version}, expected {PROTOCOL_VERSION}"
            ))),
            Ok(other) => Err(Error::Handshake(format!("expected hello, got {}", other.kind()))),
            Err(Error::Session(m)) => Err(Error::Handshake(m)),
            Err(e) => Err(e),
        }
    }

    pub fn episode_invalid(&self) -> bool {
        self.invalid
    }

    fn request(&mut self, msg: &EnvMessage) -> Result<EnvMessage> {
        self.transport.send(&encode(msg)?)?;
        let line = self
            .transport
            .recv()?
            .ok_or_else(|| Error::Session("connection closed by peer".into()))?;
        match decode(&line)? {
            EnvMessage::Error { message } => Err(Error::Session(format!("peer error: {message}"))),
            reply => Ok(reply),
        }
    }

    fn checked(&mut self, msg: &EnvMessage) -> Result<EnvMessage> {
        let r = self.request(msg);
        if r.is_err() {
            self.invalid = true;
        }
        r
    }

    /// Sends `bye` and waits for the acknowledgement.
    pub fn close(mut self) -> Result<()> {
        match self.request(&EnvMessage::Bye)? {
            EnvMessage::Bye => Ok(()),
            other => Err(Error::Session(format!("expected bye, got {}", other.kind()))),
        }
    }
}

impl<T: LineTransport> Environment for RemoteEnv<T> {
    fn reset(&mut self, seed: u64) -> Result<CropState> {
        self.pending_weather = None;
        match self.checked(&EnvMessage::Reset { seed })? {
            EnvMessage::Observation { values } => {
                let state = CropState::from_observation(&values)?;
                self.invalid = false;
                Ok(state)
            }
            other => {
                self.invalid = true;
                Err(Error::Session(format!("reset answered with {}", other.kind())))
            }
        }
    }

    fn step(&mut self, action: ActionChoice) -> Result<StepOutcome> {
        if self.invalid {
            return Err(Error::Session("episode is invalid; reset first".into()));
        }
        let weather = self.pending_weather.take();
        let msg = EnvMessage::Step {
            action: action.index(),
            weather,
        };
        match self.checked(&msg)? {
            EnvMessage::Outcome {
                values,
                reward,
                done,
                info,
            } => Ok(StepOutcome {
                next_state: CropState::from_observation(&values)?,
                reward,
                done,
                info: StepInfo::from(&info),
            }),
            other => {
                self.invalid = true;
                Err(Error::Session(format!("step answered with {}", other.kind())))
            }
        }
    }

    fn perturb_weather(&mut self, temperature: f64, rainfall: f64) -> Result<bool> {
        self.pending_weather = Some([temperature, rainfall]);
        Ok(true)
    }
}

fn answer(env: &mut dyn Environment, msg: EnvMessage) -> Result<EnvMessage> {
    Ok(match msg {
        EnvMessage::Reset { seed } => EnvMessage::Observation {
            values: env.reset(seed)?.observe().to_vec(),
        },
        EnvMessage::Step { action, weather } => {
            if let Some([t, r]) = weather {
                env.perturb_weather(t, r)?;
            }
            let out = env.step(ActionChoice::from_index(action)?)?;
            EnvMessage::Outcome {
                values: out.next_state.observe().to_vec(),
                reward: out.reward,
                done: out.done,
                info: WireInfo::from(&out.info),
            }
        }
        other => {
            return Err(Error::Protocol {
                message: format!("unexpected request kind {}", other.kind()),
                line: String::new(),
            })
        }
    })
}

/// Serves `env` until the peer says `bye` or closes the stream. Failures
/// inside a request are reported to the peer as `error` messages; a
/// version mismatch ends the session.
pub fn serve(env: &mut dyn Environment, transport: &mut dyn LineTransport) -> Result<()> {
    while let Some(line) = transport.recv()? {
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode(&line) {
            Ok(EnvMessage::Hello { version }) if version == PROTOCOL_VERSION => EnvMessage::Hello {
                version: PROTOCOL_VERSION,
            },
            Ok(EnvMessage::Hello { version }) => {
                let message = format!("unsupported protocol version {version}");
                transport.send(&encode(&EnvMessage::Error {
                    message: message.clone(),
                })?)?;
                return Err(Error::Handshake(message));
            }
            Ok(EnvMessage::Bye) => {
                transport.send(&encode(&EnvMessage::Bye)?)?;
                return Ok(());
            }
            Ok(msg) => answer(env, msg).unwrap_or_else(|e| EnvMessage::Error { message: e.to_string() }),
            Err(e) => EnvMessage::Error { message: e.to_string() },
        };
        transport.send(&encode(&reply)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RewardWeights, ScenarioConfig};
    use crate::rng::seeded;
    use crate::SurrogateEnv;
    use proptest::prelude::*;
    use rand::Rng;

    fn surrogate() -> SurrogateEnv {
        SurrogateEnv::new(ScenarioConfig::florida(), RewardWeights::default()).unwrap()
    }

    fn spawn_server() -> (RemoteEnv<ChannelTransport>, thread::JoinHandle<Result<()>>) {
        let (client, mut server) = channel_pair();
        let handle = thread::spawn(move || serve(&mut surrogate(), &mut server));
        (RemoteEnv::connect(client).unwrap(), handle)
    }

    #[test]
    fn hello_line() {
        let line = encode(&EnvMessage::Hello { version: 1 }).unwrap();
        assert_eq!(line, "{\"kind\":\"hello\",\"version\":1}\n");
        assert_eq!(decode(&line).unwrap(), EnvMessage::Hello { version: 1 });
    }

    #[test]
    fn step_round_trip() {
        let m = EnvMessage::Step {
            action: 13,
            weather: None,
        };
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
        assert!(!encode(&m).unwrap().contains("weather"));
    }

    #[test]
    fn observation_round_trip_is_exact() {
        let mut rng = seeded(4);
        let values: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-1e3..1e3)).collect();
        let m = EnvMessage::Observation { values: values.clone() };
        match decode(&encode(&m).unwrap()).unwrap() {
            EnvMessage::Observation { values: back } => {
                for (a, b) in values.iter().zip(&back) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(decode("\u{1}\u{2}garbage"), Err(Error::Protocol { .. })));
        assert!(matches!(decode("{\"kind\":\"warp\"}"), Err(Error::Protocol { .. })));
        let short = format!("{{\"kind\":\"observation\",\"values\":{:?}}}", vec![0.0; 24]);
        assert!(matches!(decode(&short), Err(Error::Schema(_))));
        assert!(matches!(
            decode("{\"kind\":\"step\",\"action\":25}"),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            encode(&EnvMessage::Observation { values: vec![1.0; 3] }),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn loopback_matches_direct() {
        let (mut remote, handle) = spawn_server();
        let mut direct = surrogate();
        let mut rng = seeded(9);
        for ep in 0..3u64 {
            assert_eq!(remote.reset(ep).unwrap(), direct.reset(ep).unwrap());
            loop {
                let a = ActionChoice::from_index(rng.random_range(0..N_ACTIONS)).unwrap();
                if rng.random_bool(0.2) {
                    let (t, r) = (rng.random_range(10.0..35.0), rng.random_range(0.0..20.0));
                    assert!(remote.perturb_weather(t, r).unwrap());
                    direct.perturb_weather(t, r).unwrap();
                }
                let x = remote.step(a).unwrap();
                let y = direct.step(a).unwrap();
                assert_eq!(x, y);
                if x.done {
                    break;
                }
            }
        }
        remote.close().unwrap();
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn peer_error_surfaces_as_session_error() {
        let (mut remote, handle) = spawn_server();
        let err = remote.step(ActionChoice::from_index(0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Session(_)), "{err}");
        remote.reset(1).unwrap();
        // The server answers a step before reset with an error kind.
        let (client, mut server) = channel_pair();
        let h2 = thread::spawn(move || serve(&mut surrogate(), &mut server));
        let mut raw = RemoteEnv {
            transport: client,
            invalid: false,
            pending_weather: None,
        };
        let err = raw.step(ActionChoice::from_index(0).unwrap()).unwrap_err();
        assert!(err.to_string().contains("peer error"), "{err}");
        assert!(raw.episode_invalid());
        drop(raw);
        h2.join().unwrap().unwrap();
        remote.close().unwrap();
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn dropped_connection_invalidates_episode() {
        let (client, mut server) = channel_pair();
        let handle = thread::spawn(move || {
            let mut env = surrogate();
            // Handshake and reset, then hang up.
            for _ in 0..2 {
                let line = server.recv().unwrap().unwrap();
                let reply = match decode(&line).unwrap() {
                    EnvMessage::Hello { .. } => EnvMessage::Hello { version: 1 },
                    m => answer(&mut env, m).unwrap(),
                };
                server.send(&encode(&reply).unwrap()).unwrap();
            }
        });
        let mut remote = RemoteEnv::connect(client).unwrap();
        remote.reset(3).unwrap();
        handle.join().unwrap();
        let err = remote.step(ActionChoice::from_index(5).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Session(_)));
        assert!(remote.episode_invalid());
    }

    #[test]
    fn version_mismatch() {
        let (client, mut server) = channel_pair();
        let handle = thread::spawn(move || {
            server.recv().unwrap();
            server
                .send(&encode(&EnvMessage::Hello { version: 2 }).unwrap())
                .unwrap();
        });
        assert!(matches!(RemoteEnv::connect(client), Err(Error::Handshake(_))));
        handle.join().unwrap();

        let (mut client, mut server) = channel_pair();
        let handle = thread::spawn(move || serve(&mut surrogate(), &mut server));
        client
            .send(&encode(&EnvMessage::Hello { version: 7 }).unwrap())
            .unwrap();
        assert!(matches!(
            decode(&client.recv().unwrap().unwrap()).unwrap(),
            EnvMessage::Error { .. }
        ));
        assert!(matches!(handle.join().unwrap(), Err(Error::Handshake(_))));
    }

    #[test]
    fn silent_peer_times_out() {
        let (client, _server) = channel_pair();
        let client = client.with_timeout(Duration::from_millis(50));
        let err = RemoteEnv::connect(client).err().unwrap();
        assert!(matches!(err, Error::Handshake(_)), "{err}");
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6f64..1e6, Just(0.0), (-1e300f64..1e300)]
    }

    fn message() -> impl Strategy<Value = EnvMessage> {
        prop_oneof![
            any::<u32>().prop_map(|version| EnvMessage::Hello { version }),
            any::<u64>().prop_map(|seed| EnvMessage::Reset { seed }),
            (0..N_ACTIONS, proptest::option::of((finite(), finite()))).prop_map(|(action, w)| EnvMessage::Step {
                action,
                weather: w.map(|(a, b)| [a, b])
            }),
            proptest::collection::vec(finite(), OBS_DIM).prop_map(|values| EnvMessage::Observation { values }),
            (
                proptest::collection::vec(finite(), OBS_DIM),
                finite(),
                any::<bool>(),
                finite(),
                finite()
            )
                .prop_map(|(values, reward, done, a, b)| EnvMessage::Outcome {
                    values,
                    reward,
                    done,
                    info: WireInfo {
                        yield_kg_ha: a,
                        nitrate_leached: b,
                        nitrogen_applied: 80.0,
                        irrigation_applied: 6.0
                    },
                }),
            ".*".prop_map(|message| EnvMessage::Error { message }),
            Just(EnvMessage::Bye),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(m in message()) {
            let line = encode(&m).unwrap();
            prop_assert_eq!(line.matches('\n').count(), 1);
            prop_assert_eq!(decode(&line).unwrap(), m);
        }
    }
}
