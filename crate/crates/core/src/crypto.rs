//! Signatures, MACs and digests.
//!
//! Two interchangeable suites sit behind [`CryptoSuite`]: [`ProductionSuite`]
//! (Ed25519, AES-128-CMAC) and [`TestSuite`], a keyed-hash stand-in that is
//! deterministic and cheap so simulation traces stay byte-reproducible. Digests
//! are SHA-256 under both suites.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use aes::Aes128;
use cmac::{Cmac, Mac};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::types::{ClientId, ReplicaId};

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(dec.fixed()?))
    }
}

/// SHA-256 of `message`.
pub fn digest(message: &[u8]) -> Digest {
    Digest(Sha256::digest(message).into())
}

/// SHA-256 over the concatenation of `parts`.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// Owner of a signing key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Principal {
    Replica(ReplicaId),
    Client(ClientId),
}

impl Canonical for Principal {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Principal::Replica(id) => enc.u8(0).replica(*id),
            Principal::Client(id) => enc.u8(1).fixed(&id.0),
        };
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(Principal::Replica(dec.replica()?)),
            1 => Ok(Principal::Client(ClientId(dec.fixed()?))),
            tag => Err(DecodeError::BadTag { what: "principal", tag }),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PublicKey(pub Vec<u8>);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", hex::encode(&self.0[..self.0.len().min(6)]))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub Vec<u8>);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
    pub owner: Principal,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: Principal,
    pub bytes: Vec<u8>,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sig({:?}, {})",
            self.signer,
            hex::encode(&self.bytes[..self.bytes.len().min(4)])
        )
    }
}

impl Canonical for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.signer).bytes(&self.bytes);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Signature {
            signer: dec.get()?,
            bytes: dec.bytes()?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct MacKey(pub [u8; 16]);

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MacTag(pub [u8; 16]);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key: {0}")]
    MalformedKey(&'static str),
    #[error("no key registered for {0:?}")]
    UnknownPrincipal(Principal),
    #[error("no pairwise key between {0:?} and {1:?}")]
    MissingPairwiseKey(Principal, Principal),
}

/// How a message kind is authenticated on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuthClass {
    /// Carries a digital signature because it gets forwarded.
    Signature,
    /// Point-to-point only; authenticated with a pairwise MAC.
    Mac,
}

pub trait CryptoSuite: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn keypair_from_seed(&self, seed: &[u8; 32]) -> (PublicKey, SecretKey);
    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Result<Vec<u8>, CryptoError>;
    fn verify(&self, public: &PublicKey, message: &[u8], signature: &[u8]) -> bool;
    fn mac(&self, key: &MacKey, message: &[u8]) -> MacTag;

    fn mac_verify(&self, key: &MacKey, message: &[u8], tag: &MacTag) -> bool {
        let expected = self.mac(key, message);
        // Constant-time compare.
        expected
            .0
            .iter()
            .zip(tag.0.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

/// Ed25519 signatures and AES-128-CMAC.
#[derive(Debug, Default)]
pub struct ProductionSuite;

impl CryptoSuite for ProductionSuite {
    fn name(&self) -> &'static str {
        "ed25519-cmac"
    }

    fn keypair_from_seed(&self, seed: &[u8; 32]) -> (PublicKey, SecretKey) {
        let signing = SigningKey::from_bytes(seed);
        (
            PublicKey(signing.verifying_key().to_bytes().to_vec()),
            SecretKey(seed.to_vec()),
        )
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let seed: [u8; 32] = secret
            .0
            .as_slice()
            .try_into()
            .map_err(|_| CryptoError::MalformedKey("ed25519 secret must be 32 bytes"))?;
        Ok(SigningKey::from_bytes(&seed).sign(message).to_bytes().to_vec())
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
        let Ok(pk) = <[u8; 32]>::try_from(public.0.as_slice()) else {
            return false;
        };
        let Ok(key) = VerifyingKey::from_bytes(&pk) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
            return false;
        };
        key.verify(message, &sig).is_ok()
    }

    fn mac(&self, key: &MacKey, message: &[u8]) -> MacTag {
        let mut mac = <Cmac<Aes128> as Mac>::new_from_slice(&key.0).expect("16-byte key");
        mac.update(message);
        MacTag(mac.finalize().into_bytes().into())
    }
}

/// Keyed SHA-256 stand-in for signatures and MACs.
///
/// The public key is a hash of the secret and a signature is a hash over the
/// public key and the message, so tampering with the message, the signature or
/// the key is detected. It offers no unforgeability and exists for simulation.
#[derive(Debug, Default)]
pub struct TestSuite;

impl TestSuite {
    fn public_of(secret: &[u8]) -> Vec<u8> {
        digest_parts(&[b"geobft/test/pk", secret]).0.to_vec()
    }

    fn tag(public: &[u8], message: &[u8]) -> Vec<u8> {
        digest_parts(&[b"geobft/test/sig", public, message]).0.to_vec()
    }
}

impl CryptoSuite for TestSuite {
    fn name(&self) -> &'static str {
        "keyed-sha256"
    }

    fn keypair_from_seed(&self, seed: &[u8; 32]) -> (PublicKey, SecretKey) {
        (PublicKey(Self::public_of(seed)), SecretKey(seed.to_vec()))
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if secret.0.len() != 32 {
            return Err(CryptoError::MalformedKey("test secret must be 32 bytes"));
        }
        Ok(Self::tag(&Self::public_of(&secret.0), message))
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
        public.0.len() == 32 && Self::tag(&public.0, message) == signature
    }

    fn mac(&self, key: &MacKey, message: &[u8]) -> MacTag {
        let full = digest_parts(&[b"geobft/test/mac", &key.0, message]);
        MacTag(full.0[..16].try_into().unwrap())
    }
}

/// Public keys of every principal plus deterministic pairwise MAC keys.
#[derive(Debug, Clone)]
pub struct KeyDirectory {
    public: BTreeMap<Principal, PublicKey>,
    pairwise_seed: [u8; 32],
}

impl KeyDirectory {
    pub fn new(pairwise_seed: [u8; 32]) -> Self {
        KeyDirectory {
            public: BTreeMap::new(),
            pairwise_seed,
        }
    }

    pub fn register(&mut self, owner: Principal, public: PublicKey) {
        self.public.insert(owner, public);
    }

    pub fn public_key(&self, owner: &Principal) -> Result<&PublicKey, CryptoError> {
        self.public.get(owner).ok_or(CryptoError::UnknownPrincipal(*owner))
    }

    pub fn contains(&self, owner: &Principal) -> bool {
        self.public.contains_key(owner)
    }

    /// Symmetric key shared by `a` and `b`; both must be registered.
    pub fn pairwise_key(&self, a: Principal, b: Principal) -> Result<MacKey, CryptoError> {
        if !self.contains(&a) || !self.contains(&b) {
            return Err(CryptoError::MissingPairwiseKey(a, b));
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let d = digest_parts(&[
            b"geobft/pairwise",
            &self.pairwise_seed,
            &lo.to_canonical(),
            &hi.to_canonical(),
        ]);
        Ok(MacKey(d.0[..16].try_into().unwrap()))
    }
}

/// Deterministic key seed for `owner` under a scenario seed.
pub fn key_seed(scenario_seed: u64, owner: Principal) -> [u8; 32] {
    digest_parts(&[b"geobft/keygen", &scenario_seed.to_le_bytes(), &owner.to_canonical()]).0
}

pub fn derive_keypair(suite: &dyn CryptoSuite, scenario_seed: u64, owner: Principal) -> KeyPair {
    let (public, secret) = suite.keypair_from_seed(&key_seed(scenario_seed, owner));
    KeyPair { public, secret, owner }
}

/// Operation counters, read by the simulator's CPU cost model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CryptoWork {
    pub signs: u32,
    pub verifies: u32,
    pub macs: u32,
    pub request_hashes: u32,
}

/// A suite bound to a key directory, with per-owner operation counters.
#[derive(Debug)]
pub struct Crypto {
    suite: Arc<dyn CryptoSuite>,
    directory: Arc<KeyDirectory>,
    work: Cell<CryptoWork>,
    pairwise: RefCell<BTreeMap<(Principal, Principal), MacKey>>,
}

impl Clone for Crypto {
    fn clone(&self) -> Self {
        Crypto::new(self.suite.clone(), self.directory.clone())
    }
}

impl Crypto {
    pub fn new(suite: Arc<dyn CryptoSuite>, directory: Arc<KeyDirectory>) -> Self {
        Crypto {
            suite,
            directory,
            work: Cell::new(CryptoWork::default()),
            pairwise: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn suite(&self) -> &dyn CryptoSuite {
        self.suite.as_ref()
    }

    pub fn directory(&self) -> &KeyDirectory {
        &self.directory
    }

    fn bump(&self, f: impl FnOnce(&mut CryptoWork)) {
        let mut w = self.work.get();
        f(&mut w);
        self.work.set(w);
    }

    /// Returns and resets the operation counters.
    pub fn take_work(&self) -> CryptoWork {
        self.work.take()
    }

    pub fn sign(&self, key: &KeyPair, message: &[u8]) -> Signature {
        self.bump(|w| w.signs += 1);
        let bytes = self
            .suite
            .sign(&key.secret, message)
            .expect("locally generated keys are well-formed");
        Signature {
            signer: key.owner,
            bytes,
        }
    }

    /// Verifies `signature` was made by `expected` over `message`.
    pub fn verify(&self, expected: Principal, message: &[u8], signature: &Signature) -> bool {
        self.bump(|w| w.verifies += 1);
        if signature.signer != expected {
            return false;
        }
        match self.directory.public_key(&expected) {
            Ok(pk) => self.suite.verify(pk, message, &signature.bytes),
            Err(_) => false,
        }
    }

    fn pairwise_key(&self, a: Principal, b: Principal) -> Result<MacKey, CryptoError> {
        if let Some(key) = self.pairwise.borrow().get(&(a, b)) {
            return Ok(*key);
        }
        let key = self.directory.pairwise_key(a, b)?;
        self.pairwise.borrow_mut().insert((a, b), key);
        Ok(key)
    }

    pub fn mac(&self, from: Principal, to: Principal, message: &[u8]) -> Result<MacTag, CryptoError> {
        self.bump(|w| w.macs += 1);
        let key = self.pairwise_key(from, to)?;
        Ok(self.suite.mac(&key, message))
    }

    pub fn mac_verify(&self, from: Principal, to: Principal, message: &[u8], tag: &MacTag) -> bool {
        self.bump(|w| w.macs += 1);
        match self.pairwise_key(from, to) {
            Ok(key) => self.suite.mac_verify(&key, message, tag),
            Err(_) => false,
        }
    }

    pub fn note_request_hash(&self) {
        self.bump(|w| w.request_hashes += 1);
    }
}
