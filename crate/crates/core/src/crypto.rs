//! Fixed cryptographic suite shared by every layer.
//!
//! Signatures are Ed25519, hashing is SHA-256, key derivation is HKDF-SHA-256
//! and symmetric encryption is AES-256-GCM. Public-key encryption (`seal`) is
//! ephemeral X25519 followed by HKDF and AES-256-GCM; the output layout is
//! `ephemeral_pk (32) || nonce (12) || ciphertext+tag`.
//!
//! Nothing here reads ambient randomness: callers pass an RNG, which lets
//! multi-client scenarios be replayed byte for byte.

use alloc::vec::Vec;
use core::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand_core::CryptoRngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub const SIGNATURE_LEN: usize = 64;
pub const AEAD_TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
/// Bytes added by [`seal`] on top of the plaintext.
pub const SEAL_OVERHEAD: usize = 32 + NONCE_LEN + AEAD_TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("malformed key material")]
    KeyError,
    #[error("decryption failed")]
    DecryptError,
}

macro_rules! hex_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> alloc::string::String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out).ok()?;
                Some(Self(out))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), hex::encode(&self.0[..4]))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = alloc::string::String::deserialize(d)?;
                Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad hex length"))
            }
        }
    };
}

hex_newtype!(Digest32, 32);
hex_newtype!(PublicKey, 32);
hex_newtype!(SecretKey, 32);
hex_newtype!(Signature, 64);

/// Ed25519 keypair. The secret is the 32-byte RFC 8032 seed.
#[derive(Clone, Serialize, Deserialize)]
pub struct SigKeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl fmt::Debug for SigKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl SigKeyPair {
    pub fn generate(rng: &mut impl CryptoRngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_secret(SecretKey(seed))
    }

    pub fn from_secret(secret: SecretKey) -> Self {
        let signing = ed25519_dalek::SigningKey::from_bytes(&secret.0);
        Self { public: PublicKey(signing.verifying_key().to_bytes()), secret }
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        sign(&self.secret, msg)
    }
}

/// X25519 keypair used for sealing Welcome payloads and commit secrets.
#[derive(Clone, Serialize, Deserialize)]
pub struct KemKeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl fmt::Debug for KemKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KemKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl KemKeyPair {
    pub fn generate(rng: &mut impl CryptoRngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_secret(SecretKey(seed))
    }

    pub fn from_secret(secret: SecretKey) -> Self {
        let sk = x25519_dalek::StaticSecret::from(secret.0);
        let pk = x25519_dalek::PublicKey::from(&sk);
        Self { public: PublicKey(pk.to_bytes()), secret }
    }
}

pub fn sign(secret: &SecretKey, msg: &[u8]) -> Signature {
    let key = ed25519_dalek::SigningKey::from_bytes(&secret.0);
    Signature(key.sign(msg).to_bytes())
}

/// Never errors: malformed keys or signatures simply do not verify.
pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify(msg, &sig).is_ok()
}

pub fn hash(msg: &[u8]) -> Digest32 {
    Digest32(Sha256::digest(msg).into())
}

/// Hash of the concatenation of `parts`, without materialising it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest32 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest32(h.finalize().into())
}

/// HKDF-SHA-256 with `info = label || 0x00 || context` and no salt.
pub fn kdf(secret: &[u8], label: &str, context: &[u8]) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(None, secret);
    let mut info = Vec::with_capacity(label.len() + 1 + context.len());
    info.extend_from_slice(label.as_bytes());
    info.push(0);
    info.extend_from_slice(context);
    let mut out = [0u8; 32];
    hk.expand(&info, &mut out).expect("32 bytes is a valid HKDF-SHA-256 length");
    out
}

pub fn aead_encrypt(key: &[u8; 32], nonce: &[u8; NONCE_LEN], aad: &[u8], pt: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(key.into());
    cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: pt, aad })
        .expect("AES-GCM encryption is infallible for in-memory buffers")
}

pub fn aead_decrypt(
    key: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    ct: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new(key.into());
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
        .map_err(|_| CryptoError::DecryptError)
}

/// Encrypt `msg` to the holder of `public`.
pub fn seal(public: &PublicKey, msg: &[u8], rng: &mut impl CryptoRngCore) -> Vec<u8> {
    let eph = KemKeyPair::generate(rng);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    seal_with(public, msg, &eph, &nonce)
}

fn seal_key(shared: &[u8; 32], eph_pk: &PublicKey, recipient: &PublicKey) -> [u8; 32] {
    let mut ctx = [0u8; 64];
    ctx[..32].copy_from_slice(&eph_pk.0);
    ctx[32..].copy_from_slice(&recipient.0);
    kdf(shared, "seal", &ctx)
}

/// Deterministic core of [`seal`] with the ephemeral key and nonce supplied.
pub fn seal_with(
    public: &PublicKey,
    msg: &[u8],
    eph: &KemKeyPair,
    nonce: &[u8; NONCE_LEN],
) -> Vec<u8> {
    let sk = x25519_dalek::StaticSecret::from(eph.secret.0);
    let shared = sk.diffie_hellman(&x25519_dalek::PublicKey::from(public.0));
    let key = seal_key(shared.as_bytes(), &eph.public, public);
    let ct = aead_encrypt(&key, nonce, &eph.public.0, msg);
    let mut out = Vec::with_capacity(SEAL_OVERHEAD + msg.len());
    out.extend_from_slice(&eph.public.0);
    out.extend_from_slice(nonce);
    out.extend_from_slice(&ct);
    out
}

pub fn open(secret: &SecretKey, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < SEAL_OVERHEAD {
        return Err(CryptoError::DecryptError);
    }
    let mut eph_pk = [0u8; 32];
    eph_pk.copy_from_slice(&sealed[..32]);
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&sealed[32..32 + NONCE_LEN]);
    let sk = x25519_dalek::StaticSecret::from(secret.0);
    let own_pk = PublicKey(x25519_dalek::PublicKey::from(&sk).to_bytes());
    let shared = sk.diffie_hellman(&x25519_dalek::PublicKey::from(eph_pk));
    let key = seal_key(shared.as_bytes(), &PublicKey(eph_pk), &own_pk);
    aead_decrypt(&key, &nonce, &eph_pk, &sealed[32 + NONCE_LEN..])
}

/// `nonce || ct` framing used for symmetric payloads on the wire.
pub fn aead_seal_framed(key: &[u8; 32], aad: &[u8], pt: &[u8], rng: &mut impl CryptoRngCore) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut out = nonce.to_vec();
    out.extend_from_slice(&aead_encrypt(key, &nonce, aad, pt));
    out
}

pub fn aead_open_framed(key: &[u8; 32], aad: &[u8], framed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if framed.len() < NONCE_LEN + AEAD_TAG_LEN {
        return Err(CryptoError::DecryptError);
    }
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&framed[..NONCE_LEN]);
    aead_decrypt(key, &nonce, aad, &framed[NONCE_LEN..])
}

pub fn random_bytes<const N: usize>(rng: &mut impl CryptoRngCore) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}
