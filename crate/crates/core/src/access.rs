//! Authentication and authorization.
//!
//! Tokens have the plaintext form `<token_id>.<secret>`. Only the SHA-256
//! of the secret is stored. Authorization produces a [`Grant`], which is the
//! only way to obtain the proof value that delivery and deletion demand.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::metadata::{DocId, DocumentRecord, MetadataStore, StoreError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Admin,
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "user" => Ok(Role::User),
            "admin" => Ok(Role::Admin),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Admin => "admin",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    username: String,
    role: Role,
}

impl Principal {
    pub fn new(username: impl Into<String>, role: Role) -> Result<Self, String> {
        let username = username.into();
        if username.is_empty() {
            return Err("username must not be empty".into());
        }
        if username.contains('\0') {
            return Err("username must not contain NUL".into());
        }
        Ok(Principal { username, role })
    }

    pub fn username(&self) -> &str {
        &self.username
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_admin(&self) -> bool {
        self.role == Role::Admin
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiToken {
    pub token_id: String,
    /// Hex SHA-256 of the secret half.
    pub secret_hash: String,
    pub principal: Principal,
}

/// A freshly minted token. The plaintext exists only here.
pub struct IssuedToken {
    pub token_id: String,
    pub plaintext: String,
}

impl fmt::Debug for IssuedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IssuedToken")
            .field("token_id", &self.token_id)
            .finish_non_exhaustive()
    }
}

fn digest_secret(secret: &str) -> [u8; 32] {
    Sha256::digest(secret.as_bytes()).into()
}

pub fn issue_token(store: &MetadataStore, principal: Principal) -> Result<IssuedToken, StoreError> {
    let mut rng = rand::rng();
    let mut id = [0u8; 8];
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut id);
    rng.fill_bytes(&mut secret);
    let token_id = hex::encode(id);
    let secret = hex::encode(secret);
    store.put_token(ApiToken {
        token_id: token_id.clone(),
        secret_hash: hex::encode(digest_secret(&secret)),
        principal,
    })?;
    Ok(IssuedToken {
        plaintext: format!("{token_id}.{secret}"),
        token_id,
    })
}

pub fn authenticate(store: &MetadataStore, presented: &str) -> Option<Principal> {
    let (token_id, secret) = presented.split_once('.')?;
    if token_id.is_empty() || secret.is_empty() {
        return None;
    }
    let stored = store.find_token(token_id)?;
    let expected = hex::decode(&stored.secret_hash).ok()?;
    let actual = digest_secret(secret);
    bool::from(actual.as_slice().ct_eq(&expected)).then_some(stored.principal)
}

/// Extracts the credential from an `Authorization: Bearer ...` value.
pub fn bearer_credential(header: &str) -> Option<&str> {
    let (scheme, rest) = header.trim().split_once(' ')?;
    scheme
        .eq_ignore_ascii_case("bearer")
        .then(|| rest.trim())
        .filter(|t| !t.is_empty())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Read,
    Delete,
}

/// Proof that `authorize` allowed an action on one document.
#[derive(Debug)]
pub struct Grant {
    doc_id: DocId,
    action: Action,
}

impl Grant {
    pub fn doc_id(&self) -> &DocId {
        &self.doc_id
    }

    pub fn action(&self) -> Action {
        self.action
    }

    pub fn covers(&self, record: &DocumentRecord, action: Action) -> bool {
        self.doc_id == record.doc_id && self.action == action
    }
}

#[derive(Debug)]
pub enum Decision {
    Allowed(Grant),
    Denied,
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allowed(_))
    }
}

/// Owner-or-admin.
pub fn authorize(principal: &Principal, record: &DocumentRecord, action: Action) -> Decision {
    if principal.is_admin() || principal.username == record.owner {
        Decision::Allowed(Grant {
            doc_id: record.doc_id.clone(),
            action,
        })
    } else {
        Decision::Denied
    }
}
