//! Overlay identity provider.
//!
//! Identities come in three lifecycle classes:
//!
//! * `EphemeralWorkload`: minted at instance spawn, deleted when the instance
//!   stops.
//! * `EphemeralService`: self-enrolled by a service pod and held by a lease;
//!   collected by [`IdentityProvider::gc_sweep`] once the lease expires.
//! * `Persistent`: provisioned with the platform service token; only an
//!   explicit admin delete removes it.
//!
//! Credentials are `base64url(body) "." base64url(ed25519 signature)` where
//! `body` is the canonical JSON of the identity claims. A credential verifies
//! only while its identity exists and is absent from the revocation set.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Millis;
use crate::events::{BusError, EventBus, TOPIC_IDENTITY_CHANGE};
use crate::store::{Store, StoreError};

pub const DEFAULT_SERVICE_TTL_S: u64 = 30;
pub const PROVISION_TOKEN_ENV: &str = "AGYNLITE_PROVISION_TOKEN";

const IDENTITY_PREFIX: &str = "identity/";
const SUBJECT_PREFIX: &str = "identity-subject/";
const LEASE_PREFIX: &str = "lease/";
const REVOKED_PREFIX: &str = "revoked/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IdentityClass {
    EphemeralWorkload,
    EphemeralService,
    Persistent,
}

impl IdentityClass {
    fn slug(self) -> &'static str {
        match self {
            IdentityClass::EphemeralWorkload => "workload",
            IdentityClass::EphemeralService => "service",
            IdentityClass::Persistent => "persistent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub identity_id: String,
    pub class: IdentityClass,
    /// instance id, service name, or runner/app/device name
    pub subject: String,
    pub attributes: BTreeMap<String, String>,
    pub created_ts: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub lease_id: String,
    pub identity_id: String,
    pub expires_ts: Millis,
    pub ttl_s: u64,
}

/// Signed bearer credential. `Debug` never prints the token.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential(String);

impl Credential {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl std::fmt::Debug for Credential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Credential(..)")
    }
}

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("a live identity already exists for {0}")]
    DuplicateIdentity(String),
    #[error("identity not found: {0}")]
    NotFound(String),
    #[error("lease {0} is gone; re-enroll")]
    LeaseGone(String),
    #[error("ttl must be positive")]
    InvalidTtl,
    #[error("bad provisioning token")]
    BadToken,
    #[error("credential rejected: {0}")]
    Rejected(&'static str),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// The signed body of a credential. Field order is the canonical order.
#[derive(Debug, Serialize, Deserialize)]
struct Claims {
    id: String,
    class: IdentityClass,
    subject: String,
    attributes: BTreeMap<String, String>,
    created_ts: Millis,
}

pub struct IdentityProvider {
    store: Arc<Store>,
    bus: Arc<EventBus>,
    signing: SigningKey,
    verifying: VerifyingKey,
    provision_digest: [u8; 32],
}

impl std::fmt::Debug for IdentityProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityProvider").finish_non_exhaustive()
    }
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl IdentityProvider {
    pub fn new(
        store: Arc<Store>,
        bus: Arc<EventBus>,
        signing_key: [u8; 32],
        provision_token: &str,
    ) -> Self {
        let signing = SigningKey::from_bytes(&signing_key);
        Self {
            store,
            bus,
            verifying: signing.verifying_key(),
            signing,
            provision_digest: sha256(provision_token.as_bytes()),
        }
    }

    pub fn mint_workload_identity(
        &self,
        instance_id: &str,
        agent_id: &str,
        thread_id: &str,
        now: Millis,
    ) -> Result<(Identity, Credential), IdentityError> {
        let attributes = BTreeMap::from([
            ("agent_id".to_string(), agent_id.to_string()),
            ("thread_id".to_string(), thread_id.to_string()),
            ("instance_id".to_string(), instance_id.to_string()),
        ]);
        self.create(IdentityClass::EphemeralWorkload, instance_id, attributes, now, None, true)
    }

    pub fn enroll_service_identity(
        &self,
        service_name: &str,
        ttl_s: u64,
        now: Millis,
    ) -> Result<(Identity, Lease, Credential), IdentityError> {
        if ttl_s == 0 {
            return Err(IdentityError::InvalidTtl);
        }
        let lease_id = format!("lease-{}", uuid::Uuid::new_v4().simple());
        let attributes = BTreeMap::from([("service".to_string(), service_name.to_string())]);
        let (identity, cred) = self.create(
            IdentityClass::EphemeralService,
            service_name,
            attributes,
            now,
            Some(lease_id.clone()),
            false,
        )?;
        let lease = Lease {
            lease_id: lease_id.clone(),
            identity_id: identity.identity_id.clone(),
            expires_ts: now + ttl_s * 1000,
            ttl_s,
        };
        self.store
            .put_json(&format!("{LEASE_PREFIX}{lease_id}"), &lease, Some(0))?;
        Ok((identity, lease, cred))
    }

    pub fn provision_persistent(
        &self,
        name: &str,
        service_token: &str,
        now: Millis,
    ) -> Result<(Identity, Credential), IdentityError> {
        // compare digests so the comparison time does not depend on the token
        if sha256(service_token.as_bytes()) != self.provision_digest {
            return Err(IdentityError::BadToken);
        }
        let attributes = BTreeMap::from([("name".to_string(), name.to_string())]);
        self.create(IdentityClass::Persistent, name, attributes, now, None, true)
    }

    fn create(
        &self,
        class: IdentityClass,
        subject: &str,
        attributes: BTreeMap<String, String>,
        now: Millis,
        lease_id: Option<String>,
        unique_subject: bool,
    ) -> Result<(Identity, Credential), IdentityError> {
        let identity_id = format!("id-{}", uuid::Uuid::new_v4().simple());
        if unique_subject {
            let key = subject_key(class, subject);
            self.store
                .put_json(&key, &identity_id, Some(0))
                .map_err(|e| match e {
                    e if e.is_conflict() => IdentityError::DuplicateIdentity(subject.to_string()),
                    e => e.into(),
                })?;
        }
        let identity = Identity {
            identity_id: identity_id.clone(),
            class,
            subject: subject.to_string(),
            attributes,
            created_ts: now,
            lease_id,
        };
        self.store
            .put_json(&identity_key(&identity_id), &identity, Some(0))?;
        let cred = self.sign(&identity);
        self.bus.publish(
            TOPIC_IDENTITY_CHANGE,
            json!({
                "action": "created",
                "identity_id": identity_id,
                "class": class,
                "subject": subject,
            }),
        )?;
        Ok((identity, cred))
    }

    fn sign(&self, identity: &Identity) -> Credential {
        let claims = Claims {
            id: identity.identity_id.clone(),
            class: identity.class,
            subject: identity.subject.clone(),
            attributes: identity.attributes.clone(),
            created_ts: identity.created_ts,
        };
        let body = serde_json::to_vec(&claims).expect("claims serialize");
        let sig = self.signing.sign(&body);
        Credential(format!(
            "{}.{}",
            URL_SAFE_NO_PAD.encode(&body),
            URL_SAFE_NO_PAD.encode(sig.to_bytes())
        ))
    }

    /// Checks signature, revocation, and existence. Returns the identity the
    /// credential names.
    pub fn verify(&self, token: &str) -> Result<Identity, IdentityError> {
        let (body_b64, sig_b64) = token
            .split_once('.')
            .ok_or(IdentityError::Rejected("malformed"))?;
        if sig_b64.contains('.') {
            return Err(IdentityError::Rejected("malformed"));
        }
        let body = URL_SAFE_NO_PAD
            .decode(body_b64)
            .map_err(|_| IdentityError::Rejected("malformed"))?;
        let sig_bytes: [u8; 64] = URL_SAFE_NO_PAD
            .decode(sig_b64)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or(IdentityError::Rejected("malformed"))?;
        self.verifying
            .verify_strict(&body, &Signature::from_bytes(&sig_bytes))
            .map_err(|_| IdentityError::Rejected("bad signature"))?;
        let claims: Claims =
            serde_json::from_slice(&body).map_err(|_| IdentityError::Rejected("malformed"))?;
        if self
            .store
            .get(&format!("{REVOKED_PREFIX}{}", claims.id))
            .is_some()
        {
            return Err(IdentityError::Rejected("revoked"));
        }
        let identity = self
            .get(&claims.id)?
            .ok_or(IdentityError::Rejected("unknown identity"))?;
        if identity.class != claims.class
            || identity.subject != claims.subject
            || identity.attributes != claims.attributes
        {
            return Err(IdentityError::Rejected("claims mismatch"));
        }
        Ok(identity)
    }

    pub fn get(&self, identity_id: &str) -> Result<Option<Identity>, IdentityError> {
        Ok(self
            .store
            .get_json::<Identity>(&identity_key(identity_id))?
            .map(|(i, _)| i))
    }

    pub fn list(&self) -> Result<Vec<Identity>, IdentityError> {
        Ok(self
            .store
            .scan_json::<Identity>(IDENTITY_PREFIX)?
            .into_iter()
            .map(|(_, i, _)| i)
            .collect())
    }

    pub fn lease(&self, lease_id: &str) -> Result<Option<Lease>, IdentityError> {
        Ok(self
            .store
            .get_json::<Lease>(&format!("{LEASE_PREFIX}{lease_id}"))?
            .map(|(l, _)| l))
    }

    /// Revokes the credential and removes the identity (any class).
    pub fn delete_identity(&self, identity_id: &str, now: Millis) -> Result<(), IdentityError> {
        let key = identity_key(identity_id);
        let Some((identity, version)) = self.store.get_json::<Identity>(&key)? else {
            return Err(IdentityError::NotFound(identity_id.to_string()));
        };
        // revoke first: a credential must stop verifying before its record goes
        self.store
            .put_json(&format!("{REVOKED_PREFIX}{identity_id}"), &now, None)?;
        match self.store.delete(&key, version) {
            Ok(()) => {}
            Err(StoreError::NotFound(_)) => {
                return Err(IdentityError::NotFound(identity_id.to_string()))
            }
            Err(e) if e.is_conflict() => {
                return Err(IdentityError::NotFound(identity_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        let skey = subject_key(identity.class, &identity.subject);
        if let Some((owner, v)) = self.store.get_json::<String>(&skey)? {
            if owner == identity_id {
                let _ = self.store.delete(&skey, v);
            }
        }
        if let Some(lease_id) = &identity.lease_id {
            let lkey = format!("{LEASE_PREFIX}{lease_id}");
            let v = self.store.version(&lkey);
            if v > 0 {
                let _ = self.store.delete(&lkey, v);
            }
        }
        self.bus.publish(
            TOPIC_IDENTITY_CHANGE,
            json!({
                "action": "deleted",
                "identity_id": identity_id,
                "class": identity.class,
                "subject": identity.subject,
            }),
        )?;
        Ok(())
    }

    /// Extends a lease to `now + ttl`. Expiry never moves backwards.
    pub fn renew_lease(&self, lease_id: &str, now: Millis) -> Result<Millis, IdentityError> {
        let key = format!("{LEASE_PREFIX}{lease_id}");
        loop {
            let Some((mut lease, version)) = self.store.get_json::<Lease>(&key)? else {
                return Err(IdentityError::LeaseGone(lease_id.to_string()));
            };
            lease.expires_ts = lease.expires_ts.max(now + lease.ttl_s * 1000);
            match self.store.put_json(&key, &lease, Some(version)) {
                Ok(_) => return Ok(lease.expires_ts),
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Collects every service identity whose lease expired strictly before
    /// `now`. Workload and persistent identities are never touched here.
    pub fn gc_sweep(&self, now: Millis) -> Result<Vec<String>, IdentityError> {
        let mut collected = Vec::new();
        for (key, _, _) in self.store.scan_json::<Lease>(LEASE_PREFIX)? {
            loop {
                let Some((lease, version)) = self.store.get_json::<Lease>(&key)? else {
                    break;
                };
                if lease.expires_ts >= now {
                    break;
                }
                match self.store.delete(&key, version) {
                    Ok(()) => {
                        match self.delete_identity(&lease.identity_id, now) {
                            Ok(()) | Err(IdentityError::NotFound(_)) => {}
                            Err(e) => return Err(e),
                        }
                        collected.push(lease.identity_id);
                        break;
                    }
                    // a renewal landed first; re-evaluate
                    Err(e) if e.is_conflict() => continue,
                    Err(StoreError::NotFound(_)) => break,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(collected)
    }
}

fn identity_key(id: &str) -> String {
    format!("{IDENTITY_PREFIX}{id}")
}

fn subject_key(class: IdentityClass, subject: &str) -> String {
    format!("{SUBJECT_PREFIX}{}/{subject}", class.slug())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn provider() -> IdentityProvider {
        let store = Arc::new(Store::in_memory());
        let bus = EventBus::open(store.clone(), ManualClock::new(0), 5_000).unwrap();
        IdentityProvider::new(store, bus, [9; 32], "provision-me")
    }

    #[test]
    fn mint_and_verify_round_trip() {
        let p = provider();
        let (id, cred) = p.mint_workload_identity("i1", "support-bot", "t1", 5).unwrap();
        assert_eq!(id.subject, "i1");
        assert_eq!(id.class, IdentityClass::EphemeralWorkload);
        assert_eq!(id.attributes["agent_id"], "support-bot");
        assert_eq!(id.attributes["thread_id"], "t1");
        let verified = p.verify(cred.as_str()).unwrap();
        assert_eq!(verified, id);
        assert!(matches!(
            p.mint_workload_identity("i1", "support-bot", "t1", 6),
            Err(IdentityError::DuplicateIdentity(_))
        ));
    }

    #[test]
    fn delete_revokes() {
        let p = provider();
        let (id, cred) = p.mint_workload_identity("i1", "a", "t", 0).unwrap();
        p.delete_identity(&id.identity_id, 1).unwrap();
        assert!(p.verify(cred.as_str()).is_err());
        assert!(p.list().unwrap().is_empty());
        assert!(matches!(
            p.delete_identity(&id.identity_id, 2),
            Err(IdentityError::NotFound(_))
        ));
        // the instance may get a fresh identity after deletion
        p.mint_workload_identity("i1", "a", "t", 3).unwrap();
    }

    #[test]
    fn tampered_tokens_fail() {
        let p = provider();
        let (_, cred) = p.mint_workload_identity("i1", "a", "t", 0).unwrap();
        let s = cred.as_str();
        let (body, sig) = s.split_once('.').unwrap();
        let forged_body = URL_SAFE_NO_PAD.encode(
            String::from_utf8(URL_SAFE_NO_PAD.decode(body).unwrap())
                .unwrap()
                .replace("\"a\"", "\"b\""),
        );
        assert!(p.verify(&format!("{forged_body}.{sig}")).is_err());
        assert!(p.verify(&s[..s.len() - 2]).is_err());
        assert!(p.verify(body).is_err());
        assert!(p.verify(&format!("{s}.x")).is_err());
        // a token from a different signing key
        let other = IdentityProvider::new(Arc::new(Store::in_memory()), p.bus.clone(), [1; 32], "x");
        let (_, foreign) = other.mint_workload_identity("i1", "a", "t", 0).unwrap();
        assert!(p.verify(foreign.as_str()).is_err());
    }

    #[test]
    fn lease_renewal_math() {
        let p = provider();
        let t0 = 1_000_000;
        let (_, lease, _) = p.enroll_service_identity("gateway-pod-1", 30, t0).unwrap();
        assert_eq!(lease.expires_ts, t0 + 30_000);
        assert_eq!(p.renew_lease(&lease.lease_id, t0 + 20_000).unwrap(), t0 + 50_000);
        // renewal with an earlier clock never shortens the lease
        assert_eq!(p.renew_lease(&lease.lease_id, t0 + 10_000).unwrap(), t0 + 50_000);
    }

    #[test]
    fn expired_lease_is_collected() {
        let p = provider();
        let t0 = 0;
        let (svc, lease, cred) = p.enroll_service_identity("gateway-pod-1", 30, t0).unwrap();
        assert!(p.gc_sweep(t0 + 30_000).unwrap().is_empty());
        assert_eq!(p.gc_sweep(t0 + 31_000).unwrap(), vec![svc.identity_id.clone()]);
        assert!(p.get(&svc.identity_id).unwrap().is_none());
        assert!(p.verify(cred.as_str()).is_err());
        assert!(matches!(
            p.renew_lease(&lease.lease_id, t0 + 32_000),
            Err(IdentityError::LeaseGone(_))
        ));
    }

    #[test]
    fn gc_only_touches_expired_service_identities() {
        let p = provider();
        let (live, l1, _) = p.enroll_service_identity("a", 10, 0).unwrap();
        let (dead, _, _) = p.enroll_service_identity("b", 5, 0).unwrap();
        let (wl, _) = p.mint_workload_identity("i1", "x", "t", 0).unwrap();
        let (pers, _) = p.provision_persistent("runner-1", "provision-me", 0).unwrap();
        p.renew_lease(&l1.lease_id, 4_000).unwrap();
        assert_eq!(p.gc_sweep(6_000).unwrap(), vec![dead.identity_id]);
        for id in [&live, &wl, &pers] {
            assert!(p.get(&id.identity_id).unwrap().is_some());
        }
        assert!(p.gc_sweep(0).unwrap().is_empty());
    }

    #[test]
    fn empty_sweep() {
        assert!(provider().gc_sweep(123).unwrap().is_empty());
    }

    #[test]
    fn persistent_identities() {
        let p = provider();
        assert!(matches!(
            p.provision_persistent("runner-1", "wrong", 0),
            Err(IdentityError::BadToken)
        ));
        let (id, cred) = p.provision_persistent("runner-1", "provision-me", 0).unwrap();
        assert!(id.lease_id.is_none());
        for i in 0..1000u64 {
            p.gc_sweep(i * 60_000).unwrap();
        }
        assert!(p.verify(cred.as_str()).is_ok());
        p.delete_identity(&id.identity_id, 0).unwrap();
        assert!(p.verify(cred.as_str()).is_err());
    }

    #[test]
    fn zero_ttl_rejected() {
        assert!(matches!(
            provider().enroll_service_identity("s", 0, 0),
            Err(IdentityError::InvalidTtl)
        ));
    }

    #[test]
    fn credential_debug_is_redacted() {
        let p = provider();
        let (_, cred) = p.mint_workload_identity("i1", "a", "t", 0).unwrap();
        assert_eq!(format!("{cred:?}"), "Credential(..)");
    }
}
