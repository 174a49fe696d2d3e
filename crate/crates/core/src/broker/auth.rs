use rand::RngCore;
use sha2::{Digest, Sha256};

/// A user with a salted SHA-256 password hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub username: String,
    salt: [u8; 16],
    hash: [u8; 32],
}

fn digest(salt: &[u8], password: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password);
    h.finalize().into()
}

impl Credentials {
    pub fn new(username: impl Into<String>, password: &[u8]) -> Self {
        let mut salt = [0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        Credentials {
            username: username.into(),
            hash: digest(&salt, password),
            salt,
        }
    }

    /// Builds credentials from hex-encoded salt and hash, as stored in config files.
    pub fn from_hex(
        username: impl Into<String>,
        salt_hex: &str,
        hash_hex: &str,
    ) -> Result<Self, hex::FromHexError> {
        let mut salt = [0u8; 16];
        let mut hash = [0u8; 32];
        hex::decode_to_slice(salt_hex, &mut salt)?;
        hex::decode_to_slice(hash_hex, &mut hash)?;
        Ok(Credentials {
            username: username.into(),
            salt,
            hash,
        })
    }

    pub fn salt_hex(&self) -> String {
        hex::encode(self.salt)
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    pub fn verify(&self, password: &[u8]) -> bool {
        let d = digest(&self.salt, password);
        d.iter()
            .zip(self.hash.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuthRegistry {
    users: Vec<Credentials>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthOutcome {
    Accepted,
    BadCredentials,
    NotAuthorized,
}

impl AuthRegistry {
    pub fn new(users: Vec<Credentials>) -> Self {
        AuthRegistry { users }
    }

    pub fn add(&mut self, c: Credentials) {
        self.users.retain(|u| u.username != c.username);
        self.users.push(c);
    }

    pub fn check(&self, username: Option<&str>, password: Option<&[u8]>) -> AuthOutcome {
        let Some(name) = username else {
            return AuthOutcome::NotAuthorized;
        };
        match self.users.iter().find(|u| u.username == name) {
            Some(u) if u.verify(password.unwrap_or_default()) => AuthOutcome::Accepted,
            _ => AuthOutcome::BadCredentials,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn salted_hash_verifies() {
        let a = Credentials::new("admin", b"password");
        let b = Credentials::new("admin", b"password");
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert!(a.verify(b"password"));
        assert!(!a.verify(b"passwort"));
        let c = Credentials::from_hex("admin", &a.salt_hex(), &a.hash_hex()).unwrap();
        assert!(c.verify(b"password"));
        assert!(Credentials::from_hex("x", "zz", "00").is_err());
    }

    #[test]
    fn registry_outcomes() {
        let r = AuthRegistry::new(vec![Credentials::new("admin", b"password")]);
        assert_eq!(
            r.check(Some("admin"), Some(b"password")),
            AuthOutcome::Accepted
        );
        assert_eq!(
            r.check(Some("admin"), Some(b"nope")),
            AuthOutcome::BadCredentials
        );
        assert_eq!(
            r.check(Some("eve"), Some(b"password")),
            AuthOutcome::BadCredentials
        );
        assert_eq!(r.check(None, None), AuthOutcome::NotAuthorized);
    }
}
