//! Sorting every error the library can return into the three failure
//! classes the command line reports as exit codes.

use crate::archive::{ArchiveError, FetchError};
use crate::bootstrap::AuditError;
use crate::carc::CarcError;
use crate::channel::ChannelError;
use crate::derivation::{BuildError, DerivationError};
use crate::hash::ParseHashError;
use crate::manifest::{ManifestError, ProfileError};
use crate::sexpr::SyntaxError;
use crate::store::StoreError;
use crate::substitute::SubstituteError;
use crate::transport::TransportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: arguments, files, definitions.
    User,
    /// Content did not match what it was supposed to hash to.
    Verification,
    /// I/O, network, or a failing build tool.
    Environment,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::User => 1,
            ErrorClass::Verification => 2,
            ErrorClass::Environment => 3,
        }
    }
}

pub trait Classify {
    fn class(&self) -> ErrorClass;

    fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}

use ErrorClass::{Environment, User, Verification};

impl Classify for ParseHashError {
    fn class(&self) -> ErrorClass {
        User
    }
}

impl Classify for SyntaxError {
    fn class(&self) -> ErrorClass {
        User
    }
}

impl Classify for CarcError {
    fn class(&self) -> ErrorClass {
        match self {
            CarcError::UnsupportedNode(_) | CarcError::InvalidName(_) => User,
            CarcError::Malformed { .. } => Verification,
            CarcError::Io { .. } => Environment,
        }
    }
}

impl Classify for StoreError {
    fn class(&self) -> ErrorClass {
        match self {
            StoreError::InvalidLabel(_) | StoreError::InvalidStorePath(_) | StoreError::NotRegistered(_) => User,
            StoreError::StoreCorruption { .. }
            | StoreError::HashConflict { .. }
            | StoreError::DanglingReference { .. }
            | StoreError::ReferenceCycle(_)
            | StoreError::InvalidRecord { .. } => Verification,
            StoreError::Carc(e) => e.class(),
            StoreError::Io { .. } => Environment,
        }
    }
}

impl Classify for DerivationError {
    fn class(&self) -> ErrorClass {
        match self {
            DerivationError::InvariantViolation(_) | DerivationError::Syntax(_) | DerivationError::Unknown(_) => User,
            DerivationError::Store(e) => e.class(),
        }
    }
}

impl Classify for TransportError {
    fn class(&self) -> ErrorClass {
        match self {
            TransportError::Unreachable { .. } | TransportError::Io { .. } => Environment,
            TransportError::ReadOnly(_) | TransportError::UnsupportedUrl(_) => User,
            TransportError::Carc(e) => e.class(),
        }
    }
}

impl Classify for ArchiveError {
    fn class(&self) -> ErrorClass {
        match self {
            ArchiveError::ArchiveWriteError(_) => Environment,
            ArchiveError::Transport(e) => e.class(),
            ArchiveError::Corrupt { .. } => Verification,
            ArchiveError::Carc(e) => e.class(),
        }
    }
}

impl Classify for FetchError {
    fn class(&self) -> ErrorClass {
        match self {
            FetchError::HashMismatch { .. } => Verification,
            FetchError::SourceUnavailable { .. } => Environment,
            FetchError::Store(e) => e.class(),
        }
    }
}

impl Classify for SubstituteError {
    fn class(&self) -> ErrorClass {
        match self {
            SubstituteError::CorruptItem { .. }
            | SubstituteError::AllProvidersCorrupt { .. }
            | SubstituteError::BadInfo { .. } => Verification,
            SubstituteError::CacheWriteError(_) | SubstituteError::NotFound(_) => Environment,
            SubstituteError::Store(e) => e.class(),
            SubstituteError::Carc(e) => e.class(),
        }
    }
}

impl Classify for BuildError {
    fn class(&self) -> ErrorClass {
        match self {
            BuildError::StepFailure { .. } => Environment,
            BuildError::MissingSource(e) => e.class(),
            BuildError::EscapedClosure { .. } | BuildError::MissingInput(_) | BuildError::InvalidRounds(_) => User,
            BuildError::OutputCollision { .. } => Verification,
            BuildError::Round { source, .. } => source.class(),
            BuildError::Derivation(e) => e.class(),
            BuildError::Store(e) => e.class(),
            BuildError::Substitute(e) => e.class(),
        }
    }
}

impl Classify for ChannelError {
    fn class(&self) -> ErrorClass {
        match self {
            ChannelError::DuplicatePackage(_)
            | ChannelError::InvalidPackage(_)
            | ChannelError::UnknownParent(_)
            | ChannelError::UnknownRevision(_)
            | ChannelError::NoHead
            | ChannelError::Syntax(_)
            | ChannelError::BadCommit { .. } => User,
            ChannelError::CorruptRevision { .. } => Verification,
            ChannelError::UnreachableRemote { .. } | ChannelError::Io { .. } => Environment,
        }
    }
}

impl Classify for ManifestError {
    fn class(&self) -> ErrorClass {
        match self {
            ManifestError::Syntax(_)
            | ManifestError::UnsupportedForm { .. }
            | ManifestError::DuplicateSpec(_)
            | ManifestError::EmptyName(_)
            | ManifestError::EmptyVersion(_)
            | ManifestError::UnknownPackage(_)
            | ManifestError::UnknownVersion(_)
            | ManifestError::DependencyCycle(_)
            | ManifestError::ReplacementCycle(_)
            | ManifestError::InvalidTemplate { .. } => User,
            ManifestError::Derivation(e) => e.class(),
        }
    }
}

impl Classify for ProfileError {
    fn class(&self) -> ErrorClass {
        match self {
            ProfileError::ProfileCollision { .. } | ProfileError::UnknownGeneration(_) | ProfileError::NoGeneration => User,
            ProfileError::Corrupt(_) => Verification,
            ProfileError::Build(e) => e.class(),
            ProfileError::Store(e) => e.class(),
            ProfileError::Io { .. } => Environment,
        }
    }
}

impl Classify for AuditError {
    fn class(&self) -> ErrorClass {
        match self {
            AuditError::Store(e) => e.class(),
            AuditError::Derivation(e) => e.class(),
        }
    }
}
