"""Certificate-based single sign-on middleware.

One manual login at the home server yields a short-lived identity
certificate carrying RBAC roles; that certificate then authenticates the
client to any resource server in the trust domain, each session protected by
a fresh symmetric key. See README.md for the daemons, client CLI, simulator
and benchmarks built on this library.
"""

from .certificate import (
    IdentityCertificate,
    SubjectInfo,
    TrustStore,
    VerifiedIdentity,
    issue,
    validate,
)
from .crypto import (
    AsymKeyPair,
    PublicKey,
    SealedBox,
    SecretKey,
    SymKey,
    gen_keypair,
    gen_nonce,
    gen_sym_key,
    seal,
    sha256,
    sign,
    sym_decrypt,
    sym_encrypt,
    unseal,
    verify,
)
from .protocol import (
    ClientAccess,
    ClientEnroll,
    EnrollmentResult,
    HomeServerConn,
    ReplayCache,
    ResourceServerConn,
    SessionContext,
    TimeoutPolicy,
)
from .rng import Rng

__version__ = "0.1.0"
