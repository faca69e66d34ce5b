"""BBM92 key distribution over the simulated source: sync, sifting, reconciliation, amplification, OTP."""

from .amplify import SECURITY_MARGIN, binary_entropy, privacy_amplify, secure_length, toeplitz_hash
from .cascade import QBER_LIMIT, ReconcileResult, ReconciliationAborted, key_hash, reconcile
from .channel import ChannelParams, detect_block
from .keyfile import read_key, write_key
from .otp import (Bitmap, KeyExhausted, KeyReuseError, KeyStore, bit_difference, decrypt_bitmap,
                  encrypt_bitmap, otp_decrypt, otp_encrypt, read_bmp, write_bmp)
from .session import BlockResult, SessionParams, SessionReport, SessionResult, run_session, simulate_block
from .sifting import KeyMaterial, QberEstimate, clopper_pearson, estimate_qber, match_coincidences, sift
from .sync import SyncResult, correct_times, synchronize

__all__ = [
    "Bitmap", "BlockResult", "ChannelParams", "KeyExhausted", "KeyMaterial", "KeyReuseError", "KeyStore",
    "QBER_LIMIT", "QberEstimate", "ReconcileResult", "ReconciliationAborted", "SECURITY_MARGIN",
    "SessionParams", "SessionReport", "SessionResult", "SyncResult", "binary_entropy", "bit_difference",
    "clopper_pearson", "correct_times", "decrypt_bitmap", "detect_block", "encrypt_bitmap", "estimate_qber",
    "key_hash", "match_coincidences", "otp_decrypt", "otp_encrypt", "privacy_amplify", "read_bmp",
    "read_key", "reconcile", "run_session", "secure_length", "sift", "simulate_block", "synchronize",
    "toeplitz_hash", "write_bmp", "write_key",
]
