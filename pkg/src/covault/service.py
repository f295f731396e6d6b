"""Policy-manager wire service: mutually authenticated TLS endpoints.

Transport: TLS 1.3. The service certificate's common name is the hex of
the service's own code measurement, so a connecting stakeholder verifies
both the TLS identity and what code they are talking to. Clients present
certificates from a configured trust bundle.

Framing: each message is a 4-byte big-endian length followed by one
canonical-encoded document.

Request:   {"endpoint": <name>, "body": {...}}
Response:  {"status": "ok", "body": {...}}
         | {"status": "error", "error": {"code": <code>, "detail": <text>}}

Endpoints and their body schemas:

    policy-upsert   {"policy": <policy text, string>}
                 -> {"accepted": bool, "reason": str|null,
                     "name": str, "version": int}
    session-begin   {"policy_name": str}
                 -> {"session_id": hex, "nonce": hex}
    provision       {"session_id": hex, "tee_quote": doc,
                     "channel_public": hex, "tpm_quote": doc|null,
                     "measurement_log": str|null}
                 -> {"accepted": bool, "reason": str|null,
                     "sealed_bundle": doc|null}
    owner-keys      {"policy_name": str, "session_id": hex,
                     "channel_public": hex, "request_signature": hex}
                 -> same shape as provision
    policy-fetch    {"name": str}
                 -> {"policy": <stored policy text, string>}

Error codes: bad_request, unknown_endpoint, unknown_policy,
unknown_session, internal.
"""

from __future__ import annotations

import datetime
import socket
import ssl
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml
from cryptography import x509
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.x509.oid import NameOID

from .crypto import Signature, canonical_decode, canonical_encode
from .manager import PolicyManager, UnknownPolicy, UnknownSession
from .policy import PolicyParseError, parse_policy
from .tee import TeeQuote, measure_code, pack_tree
from .tpm import MeasurementLog, TpmQuote

MAX_MESSAGE = 16 * 1024 * 1024


class ServiceError(Exception):
    def __init__(self, code: str, detail: str = "") -> None:
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}")


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def send_doc(sock, document: dict) -> None:
    payload = canonical_encode(document)
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def recv_doc(sock) -> Optional[dict]:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_MESSAGE:
        raise ServiceError("bad_request", "message too large")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ServiceError("bad_request", "truncated message")
    return canonical_decode(payload)


def _recv_exact(sock, n: int) -> Optional[bytes]:
    """Read exactly n bytes; None on clean EOF before the first byte."""
    chunks: list[bytes] = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if not chunks:
                return None
            raise ServiceError("bad_request", "connection closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# TLS identities
# ---------------------------------------------------------------------------

def generate_tls_identity(common_name: str, out_dir: Path | str, stem: str) -> tuple[Path, Path]:
    """Self-signed Ed25519 certificate; returns (key_path, cert_path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    key = Ed25519PrivateKey.generate()
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=3650))
        .add_extension(
            x509.SubjectAlternativeName([x509.DNSName("localhost")]), critical=False
        )
        .sign(key, None)
    )
    key_path = out_dir / f"{stem}.key"
    cert_path = out_dir / f"{stem}.pem"
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )
    key_path.chmod(0o600)
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    return key_path, cert_path


def service_code_measurement() -> str:
    """Measurement of the running service's own code (this package's tree)."""
    return measure_code(pack_tree(Path(__file__).resolve().parent)).hex


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    listen_host: str
    listen_port: int
    store_path: Path
    tee_attestation_root: str  # hex public key
    clock_source: str
    tls_key: Path
    tls_cert: Path
    client_ca: Path

    @classmethod
    def load(cls, path: Path | str) -> "ServiceConfig":
        path = Path(path)
        raw = yaml.safe_load(path.read_text())
        host, _, port = str(raw["listen"]).rpartition(":")
        base = path.parent
        return cls(
            listen_host=host or "127.0.0.1",
            listen_port=int(port),
            store_path=base / raw["store"],
            tee_attestation_root=str(raw["tee_attestation_root"]),
            clock_source=str(raw.get("clock_source", "system")),
            tls_key=base / raw["tls"]["key"],
            tls_cert=base / raw["tls"]["cert"],
            client_ca=base / raw["tls"]["client_ca"],
        )


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

class PolicyManagerServer:
    def __init__(self, manager: PolicyManager, config: ServiceConfig) -> None:
        if config.clock_source != "system":
            raise ServiceError("bad_request", f"unknown clock source {config.clock_source}")
        self.manager = manager
        self.config = config
        context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        context.load_cert_chain(config.tls_cert, config.tls_key)
        context.load_verify_locations(config.client_ca)
        context.verify_mode = ssl.CERT_REQUIRED
        self._context = context
        self._sock = socket.create_server((config.listen_host, config.listen_port))
        self._threads: list[threading.Thread] = []
        self._closing = False

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def serve_in_background(self) -> None:
        thread = threading.Thread(target=self._accept_loop, daemon=True)
        thread.start()
        self._threads.append(thread)

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            thread = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            with self._context.wrap_socket(conn, server_side=True) as tls:
                while True:
                    try:
                        request = recv_doc(tls)
                    except ServiceError as e:
                        send_doc(tls, _error(e.code, e.detail))
                        return
                    if request is None:
                        return
                    send_doc(tls, self._dispatch(request))
        except (ssl.SSLError, OSError):
            return

    def close(self) -> None:
        self._closing = True
        try:
            self._sock.close()
        except OSError:
            pass

    # -- endpoint dispatch ---------------------------------------------------

    def _dispatch(self, request: dict) -> dict:
        try:
            endpoint = request.get("endpoint")
            body = request.get("body")
            if not isinstance(endpoint, str) or not isinstance(body, dict):
                return _error("bad_request", "need endpoint and body")
            handler = {
                "policy-upsert": self._policy_upsert,
                "session-begin": self._session_begin,
                "provision": self._provision,
                "owner-keys": self._owner_keys,
                "policy-fetch": self._policy_fetch,
            }.get(endpoint)
            if handler is None:
                return _error("unknown_endpoint", endpoint)
            return {"status": "ok", "body": handler(body)}
        except UnknownPolicy as e:
            return _error("unknown_policy", str(e))
        except UnknownSession as e:
            return _error("unknown_session", str(e))
        except ServiceError as e:
            return _error(e.code, e.detail)
        except Exception as e:  # noqa: BLE001 - protocol boundary
            return _error("internal", f"{type(e).__name__}: {e}")

    def _policy_upsert(self, body: dict) -> dict:
        try:
            policy = parse_policy(str(body["policy"]).encode("utf-8"))
        except PolicyParseError as e:
            raise ServiceError("bad_request", str(e)) from e
        decision = self.manager.upsert_policy(policy)
        return {
            "accepted": decision.accepted,
            "reason": decision.reason,
            "name": policy.name,
            "version": policy.version,
        }

    def _session_begin(self, body: dict) -> dict:
        session_id, nonce = self.manager.begin_session(str(body["policy_name"]))
        return {"session_id": session_id, "nonce": nonce.hex()}

    def _provision(self, body: dict) -> dict:
        tee_quote = TeeQuote.from_doc(body["tee_quote"])
        tpm_quote = (
            TpmQuote.from_doc(body["tpm_quote"]) if body.get("tpm_quote") else None
        )
        log = (
            MeasurementLog.parse(body["measurement_log"])
            if body.get("measurement_log")
            else None
        )
        result = self.manager.provision_keys(
            str(body["session_id"]),
            tee_quote,
            bytes.fromhex(body["channel_public"]),
            tpm_quote=tpm_quote,
            measurement_log=log,
        )
        return {
            "accepted": result.accepted,
            "reason": result.reason,
            "sealed_bundle": result.sealed_bundle,
        }

    def _owner_keys(self, body: dict) -> dict:
        result = self.manager.owner_export_keys(
            str(body["policy_name"]),
            str(body["session_id"]),
            bytes.fromhex(body["channel_public"]),
            Signature.from_hex(body["request_signature"]),
        )
        return {
            "accepted": result.accepted,
            "reason": result.reason,
            "sealed_bundle": result.sealed_bundle,
        }

    def _policy_fetch(self, body: dict) -> dict:
        return {
            "policy": self.manager.get_policy_public(str(body["name"])).decode("utf-8")
        }


def _error(code: str, detail: str = "") -> dict:
    return {"status": "error", "error": {"code": code, "detail": detail}}


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class ManagerClient:
    """One stakeholder's view of the service over mutual TLS.

    Pins the service certificate, and checks that its common name equals
    the expected service code measurement before sending anything.
    """

    def __init__(
        self,
        host: str,
        port: int,
        server_cert: Path | str,
        client_cert: Path | str,
        client_key: Path | str,
        expected_measurement: Optional[str] = None,
    ) -> None:
        self.host = host
        self.port = port
        self.expected_measurement = expected_measurement
        context = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        context.load_verify_locations(server_cert)
        context.load_cert_chain(client_cert, client_key)
        context.check_hostname = False
        self._context = context

    def call(self, endpoint: str, body: dict) -> dict:
        with socket.create_connection((self.host, self.port), timeout=30) as raw:
            with self._context.wrap_socket(raw, server_hostname=self.host) as tls:
                self._check_service_identity(tls)
                send_doc(tls, {"endpoint": endpoint, "body": body})
                response = recv_doc(tls)
        if response is None:
            raise ServiceError("internal", "connection closed")
        if response.get("status") == "ok":
            return response["body"]
        error = response.get("error", {})
        raise ServiceError(error.get("code", "internal"), error.get("detail", ""))

    def _check_service_identity(self, tls: ssl.SSLSocket) -> None:
        if self.expected_measurement is None:
            return
        cert = tls.getpeercert()
        common_names = [
            value
            for rdn in cert.get("subject", ())
            for key, value in rdn
            if key == "commonName"
        ]
        if self.expected_measurement not in common_names:
            raise ServiceError(
                "bad_service_identity",
                f"service cert names {common_names}, expected {self.expected_measurement}",
            )
