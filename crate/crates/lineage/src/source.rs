//! Where the chain verifier gets packages and cards from: a live proof
//! server and card endpoints, or a self-contained bundle on disk.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;

use lineage_core::{AgentCard, ChainSource, EventDigest, ProofPackage};

use crate::client::{fetch_card, ClientError, PsClient};

/// Online source. Only transport failures are errors; a refused or missing
/// package or card is reported as absent and fails the step that needs it.
pub struct RemoteSource {
    ps: PsClient,
    card_sources: BTreeMap<String, String>,
}

impl RemoteSource {
    pub fn new(ps: PsClient, card_sources: BTreeMap<String, String>) -> Self {
        RemoteSource { ps, card_sources }
    }
}

fn absent_unless_transport<T>(r: Result<T, ClientError>) -> Result<Option<T>, ClientError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ ClientError::Transport(_)) => Err(e),
        Err(ClientError::Status { status: 502..=504, body }) => Err(ClientError::Transport(body)),
        Err(_) => Ok(None),
    }
}

impl ChainSource for RemoteSource {
    type Error = ClientError;

    fn package(&self, digest: &EventDigest) -> Result<Option<ProofPackage>, ClientError> {
        absent_unless_transport(self.ps.package(digest))
    }

    fn card(&self, agent_id: &str) -> Result<Option<AgentCard>, ClientError> {
        match self.card_sources.get(agent_id) {
            Some(base) => absent_unless_transport(fetch_card(base)),
            None => Ok(None),
        }
    }
}

/// Offline source over packages and cards already in hand. Packages are
/// keyed by the digest the bundle claims for them, not one recomputed from
/// their (possibly tampered) contents.
#[derive(Default, Clone)]
pub struct BundleSource {
    packages: HashMap<EventDigest, ProofPackage>,
    cards: HashMap<String, AgentCard>,
}

impl BundleSource {
    pub fn new(
        packages: impl IntoIterator<Item = (EventDigest, ProofPackage)>,
        cards: impl IntoIterator<Item = AgentCard>,
    ) -> Self {
        BundleSource {
            packages: packages.into_iter().collect(),
            cards: cards.into_iter().map(|c| (c.identity.agent_id.clone(), c)).collect(),
        }
    }
}

impl ChainSource for BundleSource {
    type Error = Infallible;

    fn package(&self, digest: &EventDigest) -> Result<Option<ProofPackage>, Infallible> {
        Ok(self.packages.get(digest).cloned())
    }

    fn card(&self, agent_id: &str) -> Result<Option<AgentCard>, Infallible> {
        Ok(self.cards.get(agent_id).cloned())
    }
}
