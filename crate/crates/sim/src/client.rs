//! Closed-loop client sessions.
//!
//! Each session keeps one request outstanding and sends the next one when
//! `f + 1` replicas of its cluster agree on a result.

use rand::Rng;

use geobft_core::crypto::{Crypto, KeyPair};
use geobft_core::messages::ClientResponse;
use geobft_core::ordering::{client_accept, Acceptance};
use geobft_core::types::{
    ClientId, ClientRequest, ClusterId, Payload, RequestAuth, Round, SimTime, SystemConfig, View, Write,
};

/// Identifier of session `index` in physical region `region`.
pub fn session_id(region: usize, index: u32) -> ClientId {
    let mut id = [0u8; 32];
    id[0] = 0xc5;
    id[1..3].copy_from_slice(&(region as u16).to_le_bytes());
    id[3..7].copy_from_slice(&index.to_le_bytes());
    ClientId(id)
}

#[derive(Clone, Debug)]
pub struct Outstanding {
    pub request: ClientRequest,
    pub first_sent: SimTime,
    pub responses: Vec<ClientResponse>,
    pub retries: u32,
}

pub struct Session {
    pub id: ClientId,
    pub keys: KeyPair,
    /// Physical region the session runs in.
    pub region: usize,
    /// Cluster its requests are addressed to.
    pub cluster: ClusterId,
    pub seq: u64,
    pub outstanding: Option<Outstanding>,
    /// Highest replica view reported in responses.
    pub view_hint: View,
}

pub enum Delivery {
    Ignored,
    Waiting,
    Accepted { latency: SimTime },
    Conflict,
}

impl Session {
    pub fn new(id: ClientId, keys: KeyPair, region: usize, cluster: ClusterId) -> Self {
        Session {
            id,
            keys,
            region,
            cluster,
            seq: 0,
            outstanding: None,
            view_hint: View(0),
        }
    }

    /// Builds and signs the next request with `batch` writes over `keyspace` keys.
    pub fn next_request(
        &mut self,
        batch: u32,
        keyspace: u64,
        now: SimTime,
        crypto: &Crypto,
        rng: &mut impl Rng,
    ) -> ClientRequest {
        self.seq += 1;
        let payload = (0..batch)
            .map(|i| Write {
                key: format!("k{}", rng.gen_range(0..keyspace)),
                value: [self.seq.to_le_bytes(), u64::from(i).to_le_bytes()].concat(),
            })
            .collect();
        let mut request = ClientRequest {
            client: self.id,
            cluster: self.cluster,
            seq: self.seq,
            payload: Payload::new(payload),
            auth: RequestAuth::Noop { round: Round(0) },
        };
        let sig = crypto.sign(&self.keys, &request.signing_bytes());
        request.auth = RequestAuth::Client(sig);
        self.outstanding = Some(Outstanding {
            request: request.clone(),
            first_sent: now,
            responses: Vec::new(),
            retries: 0,
        });
        request
    }

    /// Local index of the replica this session believes is primary.
    pub fn primary_local(&self, config: &SystemConfig) -> u16 {
        self.view_hint.primary_local(config.n)
    }

    pub fn on_response(&mut self, response: ClientResponse, now: SimTime, config: &SystemConfig) -> Delivery {
        let Some(out) = &mut self.outstanding else {
            return Delivery::Ignored;
        };
        if response.seq != out.request.seq || response.client != self.id {
            return Delivery::Ignored;
        }
        self.view_hint = self.view_hint.max(response.view);
        if out.responses.iter().any(|r| r.responder == response.responder) {
            return Delivery::Ignored;
        }
        out.responses.push(response);
        match client_accept(&out.responses, config) {
            Acceptance::Pending => Delivery::Waiting,
            Acceptance::Conflict => Delivery::Conflict,
            Acceptance::Accepted(_) => {
                let latency = now - out.first_sent;
                self.outstanding = None;
                Delivery::Accepted { latency }
            }
        }
    }
}
