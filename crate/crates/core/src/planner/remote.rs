use super::{parse_planner_turn, Planner, PlannerTurn};
use crate::chat::{ChatClient, ChatEndpoint, ChatMessage};
use crate::error::{Error, Result};

/// A planner served by a chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct RemotePlanner {
    client: ChatClient,
    max_parse_retries: u32,
}

impl RemotePlanner {
    pub fn new(endpoint: ChatEndpoint, max_parse_retries: u32) -> Self {
        Self {
            client: ChatClient::new(endpoint),
            max_parse_retries,
        }
    }
}

/// Sends the transcript and parses the reply, re-asking up to
/// `max_parse_retries` times when the reply does not parse.
pub fn remote_next_action(
    client: &ChatClient,
    transcript: &[ChatMessage],
    turn_index: usize,
    max_parse_retries: u32,
) -> Result<PlannerTurn> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let raw = client.complete(transcript)?;
        match parse_planner_turn(&raw, turn_index) {
            Ok(action) => return Ok(PlannerTurn { raw, action }),
            Err(e) if attempts > max_parse_retries => {
                return Err(Error::PlannerReply {
                    attempts,
                    message: e.to_string(),
                    raw,
                })
            }
            Err(e) => log::warn!("planner reply unparseable (attempt {attempts}): {e}"),
        }
    }
}

impl Planner for RemotePlanner {
    fn next_action(&mut self, transcript: &[ChatMessage], turn_index: usize) -> Result<PlannerTurn> {
        remote_next_action(&self.client, transcript, turn_index, self.max_parse_retries)
    }
}
