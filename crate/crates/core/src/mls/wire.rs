//! Messaging-layer wire structures. Field names are normative; all signed
//! and hashed forms use canonical JSON.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::crypto::{self, Digest32, KemKeyPair, PublicKey, SecretKey, SigKeyPair, Signature};
use crate::hexbytes::HexBytes;

/// Upper bound on the body of a single ordered application message.
pub const MAX_OAM_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPackage {
    pub username: String,
    pub sig_pk: PublicKey,
    pub kem_pk: PublicKey,
    pub sig: Signature,
}

#[derive(Serialize)]
struct KeyPackageTbs<'a> {
    username: &'a str,
    sig_pk: &'a PublicKey,
    kem_pk: &'a PublicKey,
}

impl KeyPackage {
    pub fn create(username: &str, sig: &SigKeyPair, kem: &KemKeyPair) -> Self {
        let tbs = KeyPackageTbs { username, sig_pk: &sig.public, kem_pk: &kem.public };
        Self {
            username: username.into(),
            sig_pk: sig.public,
            kem_pk: kem.public,
            sig: sig.sign(&canonical::to_vec(&tbs)),
        }
    }

    pub fn verify(&self) -> bool {
        let tbs = KeyPackageTbs { username: &self.username, sig_pk: &self.sig_pk, kem_pk: &self.kem_pk };
        crypto::verify(&self.sig_pk, &canonical::to_vec(&tbs), &self.sig)
    }

    pub fn member(&self) -> Member {
        Member { username: self.username.clone(), sig_pk: self.sig_pk, kem_pk: self.kem_pk }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub username: String,
    pub sig_pk: PublicKey,
    pub kem_pk: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum Proposal {
    Add(KeyPackage),
    Remove(String),
    Update(PublicKey),
    #[serde(rename = "OAM")]
    Oam(HexBytes),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutEntry {
    pub member: String,
    pub sealed_hex: HexBytes,
}

/// Commit body as carried inside the ordered envelope's AEAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub parent_epoch: u64,
    pub proposals: Vec<Proposal>,
    pub committer: String,
    pub commit_secret_fanout: Vec<FanoutEntry>,
    pub sig_hex: Signature,
}

#[derive(Serialize)]
struct CommitTbs<'a> {
    group_id: &'a str,
    parent_epoch: u64,
    proposals: &'a [Proposal],
    committer: &'a str,
    commit_secret_fanout: &'a [FanoutEntry],
}

impl Commit {
    pub(crate) fn tbs_bytes(
        group_id: &str,
        parent_epoch: u64,
        proposals: &[Proposal],
        committer: &str,
        fanout: &[FanoutEntry],
    ) -> Vec<u8> {
        canonical::to_vec(&CommitTbs {
            group_id,
            parent_epoch,
            proposals,
            committer,
            commit_secret_fanout: fanout,
        })
    }

    pub fn signed_bytes(&self, group_id: &str) -> Vec<u8> {
        Self::tbs_bytes(
            group_id,
            self.parent_epoch,
            &self.proposals,
            &self.committer,
            &self.commit_secret_fanout,
        )
    }

    pub fn verify(&self, group_id: &str, sig_pk: &PublicKey) -> bool {
        crypto::verify(sig_pk, &self.signed_bytes(group_id), &self.sig_hex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Ordered,
    Unordered,
    Welcome,
}

/// The unit exchanged with the delivery service. `aad_hex` is readable by
/// the service; `ct_hex` is opaque to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub channel: Channel,
    pub group_id: String,
    pub sender: String,
    pub seq: Option<u64>,
    pub aad_hex: HexBytes,
    pub ct_hex: HexBytes,
}

impl Envelope {
    /// Identity of the envelope content, independent of DS sequencing.
    pub fn digest(&self) -> Digest32 {
        crypto::hash_parts(&[&(self.aad_hex.len() as u64).to_be_bytes(), &self.aad_hex, &self.ct_hex])
    }

    pub fn ordered_aad(&self) -> Option<OrderedAad> {
        let aad: OrderedAad = canonical::from_slice(&self.aad_hex).ok()?;
        (aad.channel == Channel::Ordered).then_some(aad)
    }

    pub fn unordered_aad(&self) -> Option<UnorderedAad> {
        let aad: UnorderedAad = canonical::from_slice(&self.aad_hex).ok()?;
        (aad.channel == Channel::Unordered).then_some(aad)
    }

    pub fn welcome_aad(&self) -> Option<WelcomeAad> {
        let aad: WelcomeAad = canonical::from_slice(&self.aad_hex).ok()?;
        (aad.channel == Channel::Welcome).then_some(aad)
    }

    /// The epoch an ordered envelope claims to extend, read from the
    /// unencrypted header.
    pub fn parent_epoch(&self) -> Option<u64> {
        self.ordered_aad().map(|a| a.parent_epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedAad {
    pub channel: Channel,
    pub group_id: String,
    pub sender: String,
    pub parent_epoch: u64,
    pub parent_transcript: Digest32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnorderedAad {
    pub channel: Channel,
    pub group_id: String,
    pub sender: String,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WelcomeAad {
    pub channel: Channel,
    pub group_id: String,
    pub sender: String,
    pub recipient: String,
    pub kem_pk: PublicKey,
}

/// Plaintext sealed to a joiner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Welcome {
    pub group_id: String,
    pub epoch: u64,
    pub roster: Vec<Member>,
    pub epoch_secret: SecretKey,
    pub transcript_hash: Digest32,
    /// Digest of the envelope that carried the Add, so the joiner can
    /// recognise it in the ordered log.
    pub add_envelope: Digest32,
    pub inviter: String,
    pub inviter_sig: Signature,
}

#[derive(Serialize)]
pub(crate) struct WelcomeTbs<'a> {
    pub group_id: &'a str,
    pub epoch: u64,
    pub roster: &'a [Member],
    pub epoch_secret: &'a SecretKey,
    pub transcript_hash: &'a Digest32,
    pub add_envelope: &'a Digest32,
    pub inviter: &'a str,
}

impl Welcome {
    pub(crate) fn tbs(&self) -> Vec<u8> {
        canonical::to_vec(&WelcomeTbs {
            group_id: &self.group_id,
            epoch: self.epoch,
            roster: &self.roster,
            epoch_secret: &self.epoch_secret,
            transcript_hash: &self.transcript_hash,
            add_envelope: &self.add_envelope,
            inviter: &self.inviter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn key_package_self_signature() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let sig = SigKeyPair::generate(&mut rng);
        let kem = KemKeyPair::generate(&mut rng);
        let mut kp = KeyPackage::create("bob", &sig, &kem);
        assert!(kp.verify());
        kp.username = "mallory".into();
        assert!(!kp.verify());
    }

    #[test]
    fn proposal_json_shape() {
        let p = Proposal::Oam(HexBytes(b"hi".to_vec()));
        assert_eq!(canonical::to_string(&p), r#"{"body":"6869","kind":"OAM"}"#);
        let r = Proposal::Remove("bob".into());
        assert_eq!(canonical::to_string(&r), r#"{"body":"bob","kind":"Remove"}"#);
    }

    #[test]
    fn envelope_json_field_names() {
        let env = Envelope {
            channel: Channel::Unordered,
            group_id: "g".into(),
            sender: "a".into(),
            seq: None,
            aad_hex: HexBytes(b"{}".to_vec()),
            ct_hex: HexBytes(vec![1, 2]),
        };
        assert_eq!(
            canonical::to_string(&env),
            r#"{"aad_hex":"7b7d","channel":"unordered","ct_hex":"0102","group_id":"g","sender":"a","seq":null}"#
        );
    }
}
