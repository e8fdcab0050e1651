#![allow(dead_code)]

use std::sync::Arc;

use candle_core::Tensor;
use echoguide_core::pose::ScorerMode;
use echoguide_core::protocol::{encode_frame_payload, parse_server_message, ClientMessage, ServerMessage};
use echoguide_core::Frame;
use echoguide_service::models::PoseModel;
use echoguide_service::server::{handle_connection, ModelFactory, ServerConfig};
use echoguide_service::CascadeModels;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, DuplexStream, Lines, ReadHalf, WriteHalf};

/// Synthetic models whose scorer ignores its input and always returns
/// `score`.
pub fn pinned_models(hw: [usize; 2], score: f32) -> CascadeModels {
    let models = CascadeModels::synthetic(hw, ScorerMode::ImagesAndLandmarks, 7).unwrap();
    let PoseModel::Regression(reg) = &models.scorer else {
        panic!("synthetic scorer is a regressor");
    };
    for (name, var) in reg.store.named_vars() {
        match name.as_str() {
            "head.weight" => var.set(&var.as_tensor().zeros_like().unwrap()).unwrap(),
            "head.bias" => var
                .set(&Tensor::full(score, var.shape(), var.device()).unwrap())
                .unwrap(),
            _ => {}
        }
    }
    models
}

pub fn pinned_factory(hw: [usize; 2], score: f32) -> ModelFactory {
    Arc::new(move || Ok(pinned_models(hw, score)))
}

pub fn frame_message(session: &str, index: u64, frame: &Frame) -> ClientMessage {
    ClientMessage::Frame {
        session_id: session.into(),
        frame_index: index,
        timestamp_ms: index as f64 * 33.0,
        image_b64: encode_frame_payload(frame),
    }
}

/// In-memory connection to a server task.
pub struct Client {
    lines: Lines<BufReader<ReadHalf<DuplexStream>>>,
    write: WriteHalf<DuplexStream>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Client {
    pub fn connect(factory: ModelFactory, config: ServerConfig) -> Self {
        let (ours, theirs) = tokio::io::duplex(1 << 20);
        let server = tokio::spawn(handle_connection(theirs, factory, config));
        let (read, write) = tokio::io::split(ours);
        Self {
            lines: BufReader::new(read).lines(),
            write,
            server,
        }
    }

    pub async fn send(&mut self, msg: &ClientMessage) {
        self.send_raw(&serde_json::to_string(msg).unwrap()).await;
    }

    pub async fn send_raw(&mut self, line: &str) {
        self.write.write_all(line.as_bytes()).await.unwrap();
        self.write.write_all(b"\n").await.unwrap();
    }

    pub async fn recv(&mut self) -> ServerMessage {
        let line = tokio::time::timeout(std::time::Duration::from_secs(60), self.lines.next_line())
            .await
            .expect("server reply within a minute")
            .unwrap()
            .expect("connection still open");
        parse_server_message(&line).unwrap()
    }

    /// Close the connection and collect everything still in flight.
    pub async fn finish(mut self) -> Vec<ServerMessage> {
        self.send(&ClientMessage::Close { session_id: None }).await;
        let mut out = Vec::new();
        while let Some(line) = self.lines.next_line().await.unwrap() {
            out.push(parse_server_message(&line).unwrap());
        }
        self.server.await.unwrap().unwrap();
        out
    }
}
