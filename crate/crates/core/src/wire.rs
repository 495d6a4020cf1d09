//! Client/server control protocol: agent registration, configuration
//! retrieval and observation, load reporting, and command delivery.
//!
//! Messages are length-prefixed frames with a self-describing structured
//! body. The endpoints here exchange frames synchronously over an
//! in-process loopback, so the full protocol is exercised without
//! sockets; a socket transport would carry the same frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigDb, ConfigTree, ConfigValue};
use crate::control::{ActionRequest, LoadObservation, Monitor, RequestId};
use crate::policy::{ContainerId, NodeId};

/// Default server listen port. Real deployments override it through the
/// `server/general` configuration section.
pub const DEFAULT_PORT: u16 = 8888;

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

/// What an agent announces about its node at registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    pub ram_pages: u64,
    pub swap_pages: u64,
    pub containers: Vec<ContainerDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerDescriptor {
    pub container_id: ContainerId,
    pub profile: String,
    pub replica_group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    AuthFailed,
    DuplicateNode,
    NotRegistered,
    UnknownContainer,
    NodeBusy,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MessageBody {
    Register {
        credentials: Credentials,
        node: NodeDescriptor,
    },
    RegisterAck {
        node_id: NodeId,
    },
    GetConfigSection {
        path: String,
    },
    ConfigSection {
        tree: ConfigTree,
    },
    AddConfigObserver {
        prefix: String,
    },
    ObserverAck {
        prefix: String,
    },
    ConfigChanged {
        path: String,
        option: String,
        value: ConfigValue,
    },
    ReportLoad {
        observation: LoadObservation,
    },
    LoadAck {
        received_at_ms: u64,
    },
    Command {
        action: ActionRequest,
    },
    CommandResult {
        request_id: RequestId,
        success: bool,
        reason: Option<String>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl MessageBody {
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::Register { .. } => "register",
            MessageBody::RegisterAck { .. } => "register_ack",
            MessageBody::GetConfigSection { .. } => "get_config_section",
            MessageBody::ConfigSection { .. } => "config_section",
            MessageBody::AddConfigObserver { .. } => "add_config_observer",
            MessageBody::ObserverAck { .. } => "observer_ack",
            MessageBody::ConfigChanged { .. } => "config_changed",
            MessageBody::ReportLoad { .. } => "report_load",
            MessageBody::LoadAck { .. } => "load_ack",
            MessageBody::Command { .. } => "command",
            MessageBody::CommandResult { .. } => "command_result",
            MessageBody::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub msg_id: u64,
    pub in_reply_to: Option<u64>,
    pub body: MessageBody,
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("node {0} is already registered")]
    DuplicateNode(String),
    #[error("connection is not registered")]
    NotRegistered,
    #[error("unknown container {0}")]
    UnknownContainer(String),
    #[error("node {0} is busy with a transfer")]
    NodeBusy(String),
    #[error("connection closed")]
    Closed,
    #[error("codec error: {0}")]
    Codec(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Serialize a message as a length-prefixed frame: a 4-byte big-endian
/// body length followed by the structured body.
pub fn encode_frame(msg: &WireMessage) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("message is serializable");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Decode one complete frame.
pub fn decode_frame(frame: &[u8]) -> Result<WireMessage, WireError> {
    if frame.len() < 4 {
        return Err(WireError::Codec("frame shorter than length prefix".to_string()));
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    let body = &frame[4..];
    if body.len() != len {
        return Err(WireError::Codec(format!(
            "length prefix {} does not match body length {}",
            len,
            body.len()
        )));
    }
    serde_json::from_slice(body).map_err(|e| WireError::Codec(e.to_string()))
}

struct Connection {
    node: Option<NodeId>,
    closed: bool,
    observed_prefixes: Vec<String>,
}

/// The server side of the protocol: authenticates agents, owns the
/// monitor and the configuration database, and queues push frames
/// (commands, configuration changes) per connection.
pub struct ServerEndpoint {
    pub monitor: Monitor,
    pub config: ConfigDb,
    credentials: Credentials,
    connections: BTreeMap<ConnId, Connection>,
    registered: BTreeMap<NodeId, ConnId>,
    next_msg_id: u64,
    next_conn_id: ConnId,
    outboxes: BTreeMap<ConnId, Vec<Vec<u8>>>,
    /// Command msg_id → request, awaiting CommandResult.
    pending_commands: BTreeMap<u64, ActionRequest>,
    command_results: Vec<(RequestId, Result<(), String>)>,
    /// Current simulated time, stamped into load acknowledgements.
    pub now_ms: u64,
}

impl ServerEndpoint {
    pub fn new(monitor: Monitor, config: ConfigDb, credentials: Credentials) -> Self {
        ServerEndpoint {
            monitor,
            config,
            credentials,
            connections: BTreeMap::new(),
            registered: BTreeMap::new(),
            next_msg_id: 1,
            next_conn_id: 1,
            outboxes: BTreeMap::new(),
            pending_commands: BTreeMap::new(),
            command_results: Vec::new(),
            now_ms: 0,
        }
    }

    /// Accept a new (not yet authenticated) connection.
    pub fn accept(&mut self) -> ConnId {
        let id = self.next_conn_id;
        self.next_conn_id += 1;
        self.connections.insert(
            id,
            Connection {
                node: None,
                closed: false,
                observed_prefixes: Vec::new(),
            },
        );
        self.outboxes.insert(id, Vec::new());
        id
    }

    fn alloc_msg_id(&mut self) -> u64 {
        let id = self.next_msg_id;
        self.next_msg_id += 1;
        id
    }

    fn reply(&mut self, to: &WireMessage, body: MessageBody) -> Vec<u8> {
        let msg = WireMessage {
            msg_id: self.alloc_msg_id(),
            in_reply_to: Some(to.msg_id),
            body,
        };
        encode_frame(&msg)
    }

    /// Process one inbound frame. Requests yield exactly one reply
    /// frame; a CommandResult resolves a pending command and yields
    /// none.
    pub fn handle_frame(&mut self, conn_id: ConnId, frame: &[u8]) -> Option<Vec<u8>> {
        let msg = match decode_frame(frame) {
            Ok(msg) => msg,
            Err(e) => {
                let reply = WireMessage {
                    msg_id: self.alloc_msg_id(),
                    in_reply_to: None,
                    body: MessageBody::Error {
                        code: ErrorCode::Malformed,
                        message: e.to_string(),
                    },
                };
                return Some(encode_frame(&reply));
            }
        };
        if self.connections.get(&conn_id).is_none_or(|c| c.closed) {
            return Some(self.reply(
                &msg,
                MessageBody::Error {
                    code: ErrorCode::NotRegistered,
                    message: "connection closed".to_string(),
                },
            ));
        }

        match &msg.body {
            MessageBody::Register { credentials, node } => {
                if *credentials != self.credentials {
                    self.connections.get_mut(&conn_id).unwrap().closed = true;
                    return Some(self.reply(
                        &msg,
                        MessageBody::Error {
                            code: ErrorCode::AuthFailed,
                            message: "bad credentials".to_string(),
                        },
                    ));
                }
                if self.registered.contains_key(&node.node_id) {
                    return Some(self.reply(
                        &msg,
                        MessageBody::Error {
                            code: ErrorCode::DuplicateNode,
                            message: format!("node {} already registered", node.node_id),
                        },
                    ));
                }
                // Server-side initialization for the new session.
                self.registered.insert(node.node_id.clone(), conn_id);
                self.connections.get_mut(&conn_id).unwrap().node = Some(node.node_id.clone());
                self.monitor
                    .register_node(&node.node_id, node.ram_pages, node.swap_pages);
                for ct in &node.containers {
                    self.monitor.set_container_profile(&ct.container_id, &ct.profile);
                    if let Some(group) = &ct.replica_group {
                        self.monitor.set_replica_group(&ct.container_id, group);
                    }
                }
                let node_id = node.node_id.clone();
                Some(self.reply(&msg, MessageBody::RegisterAck { node_id }))
            }
            body => {
                let Some(node_id) = self.connections[&conn_id].node.clone() else {
                    return Some(self.reply(
                        &msg,
                        MessageBody::Error {
                            code: ErrorCode::NotRegistered,
                            message: "register first".to_string(),
                        },
                    ));
                };
                match body {
                    MessageBody::GetConfigSection { path } => match self.config.get_section(path) {
                        Ok(tree) => Some(self.reply(&msg, MessageBody::ConfigSection { tree })),
                        Err(e) => Some(self.reply(
                            &msg,
                            MessageBody::Error {
                                code: ErrorCode::Malformed,
                                message: e.to_string(),
                            },
                        )),
                    },
                    MessageBody::AddConfigObserver { prefix } => {
                        self.connections
                            .get_mut(&conn_id)
                            .unwrap()
                            .observed_prefixes
                            .push(prefix.clone());
                        Some(self.reply(
                            &msg,
                            MessageBody::ObserverAck {
                                prefix: prefix.clone(),
                            },
                        ))
                    }
                    MessageBody::ReportLoad { observation } => {
                        if observation.node_id != node_id {
                            return Some(self.reply(
                                &msg,
                                MessageBody::Error {
                                    code: ErrorCode::Malformed,
                                    message: "observation for a different node".to_string(),
                                },
                            ));
                        }
                        match self.monitor.on_observation(observation) {
                            Ok(()) => {
                                let received_at_ms = self.now_ms;
                                Some(self.reply(&msg, MessageBody::LoadAck { received_at_ms }))
                            }
                            Err(e) => Some(self.reply(
                                &msg,
                                MessageBody::Error {
                                    code: ErrorCode::NotRegistered,
                                    message: e.to_string(),
                                },
                            )),
                        }
                    }
                    MessageBody::CommandResult {
                        request_id,
                        success,
                        reason,
                    } => {
                        let known = msg
                            .in_reply_to
                            .and_then(|id| self.pending_commands.remove(&id));
                        if known.is_some() {
                            let outcome = if *success {
                                Ok(())
                            } else {
                                Err(reason.clone().unwrap_or_default())
                            };
                            self.command_results.push((*request_id, outcome));
                        }
                        None
                    }
                    _ => Some(self.reply(
                        &msg,
                        MessageBody::Error {
                            code: ErrorCode::Malformed,
                            message: format!("unexpected {} from agent", msg.body.kind()),
                        },
                    )),
                }
            }
        }
    }

    /// Queue a command push frame for the agent responsible for it:
    /// adjustments and migrations go to the source node, replications to
    /// the node that will start the replica.
    pub fn send_command(&mut self, action: &ActionRequest) -> Result<(), WireError> {
        let node = match action.kind {
            crate::control::ActionKind::Replicate => action
                .target
                .clone()
                .ok_or_else(|| WireError::Protocol("replicate without target".to_string()))?,
            _ => action.source.clone(),
        };
        let conn = *self
            .registered
            .get(&node)
            .ok_or(WireError::NotRegistered)?;
        let msg = WireMessage {
            msg_id: self.alloc_msg_id(),
            in_reply_to: None,
            body: MessageBody::Command {
                action: action.clone(),
            },
        };
        self.pending_commands.insert(msg.msg_id, action.clone());
        self.outboxes.get_mut(&conn).unwrap().push(encode_frame(&msg));
        Ok(())
    }

    /// Commit a configuration value and push ConfigChanged frames to
    /// every session observing a covering prefix.
    pub fn set_config_value(
        &mut self,
        path: &str,
        option: &str,
        value: ConfigValue,
    ) -> Result<bool, crate::config::ConfigError> {
        let Some(change) = self.config.set_value(path, option, value)? else {
            return Ok(false);
        };
        // Known server-side semantics applied locally.
        if change.path == "server/policy/overload" && change.option == "check_interval" {
            if let Some(seconds) = change.new.as_i64() {
                self.monitor.set_check_interval_s(seconds as u64);
            }
        }
        let frames: Vec<(ConnId, Vec<u8>)> = {
            let mut out = Vec::new();
            let msg_ids: Vec<ConnId> = self.connections.keys().copied().collect();
            for conn_id in msg_ids {
                let conn = &self.connections[&conn_id];
                if conn.closed {
                    continue;
                }
                let observed = conn.observed_prefixes.iter().any(|prefix| {
                    change.path == *prefix || change.path.starts_with(&format!("{}/", prefix))
                });
                if observed {
                    let msg = WireMessage {
                        msg_id: self.alloc_msg_id(),
                        in_reply_to: None,
                        body: MessageBody::ConfigChanged {
                            path: change.path.clone(),
                            option: change.option.clone(),
                            value: change.new.clone(),
                        },
                    };
                    out.push((conn_id, encode_frame(&msg)));
                }
            }
            out
        };
        for (conn_id, frame) in frames {
            self.outboxes.get_mut(&conn_id).unwrap().push(frame);
        }
        Ok(true)
    }

    /// Drain queued push frames for one connection.
    pub fn take_outbox(&mut self, conn_id: ConnId) -> Vec<Vec<u8>> {
        std::mem::take(self.outboxes.get_mut(&conn_id).unwrap_or(&mut Vec::new()))
    }

    pub fn take_command_results(&mut self) -> Vec<(RequestId, Result<(), String>)> {
        std::mem::take(&mut self.command_results)
    }

    pub fn is_registered(&self, node_id: &str) -> bool {
        self.registered.contains_key(node_id)
    }
}

/// Push content an agent decoded from its inbox.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentPush {
    Command { msg_id: u64, action: ActionRequest },
    ConfigChanged {
        path: String,
        option: String,
        value: ConfigValue,
    },
}

/// The agent (client) side of the protocol for one hardware node.
pub struct AgentEndpoint {
    pub conn_id: ConnId,
    pub node_id: NodeId,
    credentials: Credentials,
    descriptor: NodeDescriptor,
    next_msg_id: u64,
    pub registered: bool,
    pub client_config: Option<ConfigTree>,
    pub sampling_period_s: u64,
}

impl AgentEndpoint {
    pub fn new(descriptor: NodeDescriptor, credentials: Credentials) -> Self {
        AgentEndpoint {
            conn_id: 0,
            node_id: descriptor.node_id.clone(),
            credentials,
            descriptor,
            next_msg_id: 1,
            registered: false,
            client_config: None,
            sampling_period_s: 2,
        }
    }

    fn alloc_msg_id(&mut self) -> u64 {
        let id = self.next_msg_id;
        self.next_msg_id += 1;
        id
    }

    fn round_trip(
        &mut self,
        server: &mut ServerEndpoint,
        body: MessageBody,
    ) -> Result<WireMessage, WireError> {
        let msg = WireMessage {
            msg_id: self.alloc_msg_id(),
            in_reply_to: None,
            body,
        };
        let frame = encode_frame(&msg);
        let reply_frame = server
            .handle_frame(self.conn_id, &frame)
            .ok_or_else(|| WireError::Protocol("request got no reply".to_string()))?;
        let reply = decode_frame(&reply_frame)?;
        if reply.in_reply_to != Some(msg.msg_id) {
            return Err(WireError::Protocol(format!(
                "reply correlates to {:?}, expected {}",
                reply.in_reply_to, msg.msg_id
            )));
        }
        if let MessageBody::Error { code, message } = &reply.body {
            return Err(match code {
                ErrorCode::AuthFailed => WireError::AuthFailed,
                ErrorCode::DuplicateNode => WireError::DuplicateNode(message.clone()),
                ErrorCode::NotRegistered => WireError::NotRegistered,
                ErrorCode::UnknownContainer => WireError::UnknownContainer(message.clone()),
                ErrorCode::NodeBusy => WireError::NodeBusy(message.clone()),
                ErrorCode::Malformed => WireError::Protocol(message.clone()),
            });
        }
        Ok(reply)
    }

    /// Connect and run the startup sequence: register, fetch the client
    /// configuration section, and subscribe to changes under it. Only
    /// after this completes does the agent start its sensor loop.
    pub fn handshake(&mut self, server: &mut ServerEndpoint) -> Result<(), WireError> {
        self.conn_id = server.accept();
        let reply = self.round_trip(
            server,
            MessageBody::Register {
                credentials: self.credentials.clone(),
                node: self.descriptor.clone(),
            },
        )?;
        match reply.body {
            MessageBody::RegisterAck { node_id } if node_id == self.node_id => {
                self.registered = true;
            }
            other => {
                return Err(WireError::Protocol(format!(
                    "expected register_ack, got {}",
                    other.kind()
                )))
            }
        }

        let reply = self.round_trip(
            server,
            MessageBody::GetConfigSection {
                path: "client".to_string(),
            },
        )?;
        match reply.body {
            MessageBody::ConfigSection { tree } => {
                if let Some(period) = tree.get_i64("client", "frequency") {
                    self.sampling_period_s = period as u64;
                }
                self.client_config = Some(tree);
            }
            other => {
                return Err(WireError::Protocol(format!(
                    "expected config_section, got {}",
                    other.kind()
                )))
            }
        }

        let reply = self.round_trip(
            server,
            MessageBody::AddConfigObserver {
                prefix: "client".to_string(),
            },
        )?;
        match reply.body {
            MessageBody::ObserverAck { .. } => Ok(()),
            other => Err(WireError::Protocol(format!(
                "expected observer_ack, got {}",
                other.kind()
            ))),
        }
    }

    /// Send one load observation; the acknowledgement carries the server
    /// receipt time.
    pub fn report_load(
        &mut self,
        server: &mut ServerEndpoint,
        observation: LoadObservation,
    ) -> Result<u64, WireError> {
        if !self.registered {
            return Err(WireError::NotRegistered);
        }
        let reply = self.round_trip(server, MessageBody::ReportLoad { observation })?;
        match reply.body {
            MessageBody::LoadAck { received_at_ms } => Ok(received_at_ms),
            other => Err(WireError::Protocol(format!(
                "expected load_ack, got {}",
                other.kind()
            ))),
        }
    }

    /// Decode push frames from the server.
    pub fn decode_pushes(&mut self, frames: Vec<Vec<u8>>) -> Result<Vec<AgentPush>, WireError> {
        let mut pushes = Vec::new();
        for frame in frames {
            let msg = decode_frame(&frame)?;
            match msg.body {
                MessageBody::Command { action } => pushes.push(AgentPush::Command {
                    msg_id: msg.msg_id,
                    action,
                }),
                MessageBody::ConfigChanged { path, option, value } => {
                    if let Some(config) = &mut self.client_config {
                        config.set(&path, &option, value.clone());
                    }
                    if path == "client" && option == "frequency" {
                        if let Some(period) = value.as_i64() {
                            self.sampling_period_s = period as u64;
                        }
                    }
                    pushes.push(AgentPush::ConfigChanged { path, option, value });
                }
                other => {
                    return Err(WireError::Protocol(format!(
                        "unexpected push {}",
                        other.kind()
                    )))
                }
            }
        }
        Ok(pushes)
    }

    /// Report the outcome of an executed command.
    pub fn send_command_result(
        &mut self,
        server: &mut ServerEndpoint,
        command_msg_id: u64,
        request_id: RequestId,
        result: &Result<(), String>,
    ) {
        let msg = WireMessage {
            msg_id: self.alloc_msg_id(),
            in_reply_to: Some(command_msg_id),
            body: MessageBody::CommandResult {
                request_id,
                success: result.is_ok(),
                reason: result.as_ref().err().cloned(),
            },
        };
        let reply = server.handle_frame(self.conn_id, &encode_frame(&msg));
        debug_assert!(reply.is_none(), "a result is not itself answered");
    }
}
