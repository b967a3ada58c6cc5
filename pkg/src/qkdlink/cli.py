"""Command-line interface.

Subcommands:

    qkdlink simulate   --config cfg.yaml --intervals N --out DIR
    qkdlink calibrate  --config cfg.yaml --out calibrated.yaml
    qkdlink stability  --config cfg.yaml --out DIR
    qkdlink sweep      --config cfg.yaml --out DIR
    qkdlink kms serve  --config cfg.yaml --role a|b [--demo-insecure]
    qkdlink qvpn       --role initiator|responder --peer host:port
                       --kms URL --sae ID --peer-sae ID --refresh 10
                       (--send FILE | --recv DIR)

Exit codes: 0 success; 2 usage; 3 security abort (QBER above threshold
or verification failure); 4 calibration infeasible; 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_SECURITY_ABORT = 3
EXIT_CALIBRATION_INFEASIBLE = 4
EXIT_IO_ERROR = 5


def _load_cfg(path: str | None):
    from .harness.config import load_config

    return load_config(path)


def cmd_simulate(args: argparse.Namespace) -> int:
    from .harness.campaign import run_stability
    from .harness.config import config_digest
    from .harness.outputs import emit_stability_outputs

    cfg = _load_cfg(args.config)
    metrics, summary = run_stability(cfg, n_intervals=args.intervals, seed=args.seed)
    print(f"# config_digest={summary.config_digest}")
    print("timestamp,skr_bps,qber,visibility_dcc,detections_total")
    for m in metrics:
        print(f"{m.timestamp:.1f},{m.skr_bps:.1f},{m.qber:.5f},{m.visibility_dcc:.5f},{m.detections_total}")
    if summary.aborted_intervals:
        print(f"# aborted intervals: {summary.aborted_intervals}", file=sys.stderr)
    if args.out:
        emit_stability_outputs(metrics, summary, args.out, seed=args.seed or cfg.seed)
    if summary.aborted_intervals == summary.n_intervals:
        return EXIT_SECURITY_ABORT
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    from .harness.calibrate import CalibrationError, calibrate
    from .harness.config import dump_config

    cfg = _load_cfg(args.config)
    targets = cfg.raw["calibration"]["targets"]
    try:
        result = calibrate(
            targets, seed=args.seed or cfg.seed, cfg=cfg,
            max_evals=int(cfg.raw["calibration"]["max_evals"]),
        )
    except CalibrationError as exc:
        report = exc.result.to_dict() if exc.result else {"error": str(exc)}
        print(json.dumps(report, indent=2, default=float))
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION_INFEASIBLE
    print(json.dumps(result.to_dict(), indent=2, default=float))
    if args.out:
        dump_config(result.apply(cfg), args.out)
        print(f"# calibrated config written to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_stability(args: argparse.Namespace) -> int:
    from .harness.campaign import run_stability
    from .harness.outputs import emit_stability_outputs

    cfg = _load_cfg(args.config)
    metrics, summary = run_stability(cfg, n_intervals=args.intervals, seed=args.seed)
    paths = emit_stability_outputs(metrics, summary, args.out, seed=args.seed or cfg.seed)
    print(json.dumps({"summary": {"mean": summary.mean, "std": summary.std,
                                  "aborted_intervals": summary.aborted_intervals,
                                  "config_digest": summary.config_digest},
                      "outputs": {k: str(v) for k, v in paths.items()}},
                     indent=2, default=float))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    from .harness.campaign import run_attenuation_sweep
    from .harness.config import config_digest
    from .harness.outputs import emit_sweep_outputs

    cfg = _load_cfg(args.config)
    rows = run_attenuation_sweep(cfg, intervals_per_point=args.intervals, seed=args.seed)
    paths = emit_sweep_outputs(rows, args.out, config_digest(cfg), seed=args.seed or cfg.seed)
    table = [
        {"added_db": r.added_db, "skr_bps": r.skr_bps_mean, "skr_std": r.skr_bps_std,
         "qber": r.qber_mean, "qber_std": r.qber_std, "predicted": r.skr_bps_predicted,
         "aborted_fraction": r.aborted_fraction}
        for r in rows
    ]
    print(json.dumps({"rows": table, "outputs": {k: str(v) for k, v in paths.items()}},
                     indent=2, default=float))
    return EXIT_OK


def cmd_kms_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .kms import KeyStore, KmeConfig, KmeService, PeerServer, TcpPeerLink
    from .kms.api import make_app

    cfg = _load_cfg(args.config)
    k = cfg.raw["kms"]
    local_is_a = args.role == "a"
    data_dir = Path(k["data_dir"])
    data_dir.mkdir(parents=True, exist_ok=True)
    store = KeyStore(
        path=str(data_dir / f"kme-{args.role}.sqlite"),
        key_size_bits=k["key_size_bits"],
        max_key_count=k["max_key_count"],
        sae_pair=(k["master_sae_id"], k["slave_sae_id"]),
    )
    kme_config = KmeConfig(
        source_kme_id=k["kme_id_local"] if local_is_a else k["kme_id_peer"],
        target_kme_id=k["kme_id_peer"] if local_is_a else k["kme_id_local"],
        master_sae_id=k["master_sae_id"],
        slave_sae_id=k["slave_sae_id"],
        key_size_bits=k["key_size_bits"],
        max_key_count=k["max_key_count"],
        max_key_per_request=k["max_key_per_request"],
        min_key_size_bits=k["min_key_size_bits"],
        max_key_size_bits=k["max_key_size_bits"],
        reservation_ttl_s=k["reservation_ttl_s"],
        replay_window_s=k["replay_window_s"],
        require_sae_auth=k["require_sae_auth"] and not args.demo_insecure,
    )
    secret = bytes.fromhex(k["control_secret_hex"])
    peer = TcpPeerLink(k["peer_host"], int(k["peer_port"]), secret)
    service = KmeService(store, kme_config, peer_link=peer if local_is_a else None)
    control = PeerServer(service, secret, port=int(k["peer_port"]) if not local_is_a else 0).start()
    print(f"# control channel listening on port {control.port}", file=sys.stderr)
    app = make_app(service)
    uvicorn.run(app, host=args.host, port=int(args.port or k["api_port"]), log_level="warning")
    control.stop()
    return EXIT_OK


def cmd_qvpn(args: argparse.Namespace) -> int:
    import socket

    from .qvpn import EtsiClient, Tunnel, TunnelConfig

    host, _, port = args.peer.partition(":")
    cfg = TunnelConfig(
        role=args.role,
        peer_host=host or "127.0.0.1",
        peer_port=int(port or 0),
        kms_url=args.kms,
        sae_id=args.sae,
        peer_sae_id=args.peer_sae,
        refresh_interval_s=args.refresh,
    )
    sock = None
    if args.role == "responder":
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((cfg.peer_host, cfg.peer_port))
        server.listen(1)
        print(f"# waiting for initiator on {server.getsockname()}", file=sys.stderr)
        sock, _ = server.accept()
    tunnel = Tunnel(cfg, kms=EtsiClient(args.kms, args.sae), sock=sock)
    try:
        tunnel.establish()
        print(f"# tunnel up, epoch {tunnel.epoch}", file=sys.stderr)
        if args.send:
            report = tunnel.send_file(args.send, timeout_s=args.timeout)
            print(report.to_json())
        elif args.recv:
            report = tunnel.receive_file(args.recv, timeout_s=args.timeout)
            print(report.to_json())
        else:
            import time

            time.sleep(args.timeout)
        return EXIT_OK
    except Exception as exc:
        print(f"tunnel error: {exc}", file=sys.stderr)
        return EXIT_SECURITY_ABORT
    finally:
        tunnel.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdlink", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override harness seed")

    p = sub.add_parser("simulate", help="run a short simulated campaign and print metrics")
    add_common(p)
    p.add_argument("--intervals", type=int, default=10)
    p.add_argument("--out", default=None, help="also write CSV/plots to this directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit free link parameters to the configured targets")
    add_common(p)
    p.add_argument("--out", default=None, help="write the calibrated config YAML here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stability", help="long stability campaign with CSV/plot outputs")
    add_common(p)
    p.add_argument("--intervals", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("sweep", help="added-attenuation sweep with CSV/plot outputs")
    add_common(p)
    p.add_argument("--intervals", type=int, default=None, help="intervals per sweep point")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("kms", help="key management entity")
    kms_sub = p.add_subparsers(dest="kms_command", required=True)
    ps = kms_sub.add_parser("serve", help="serve the key delivery API")
    add_common(ps)
    ps.add_argument("--role", choices=["a", "b"], required=True)
    ps.add_argument("--host", default="127.0.0.1")
    ps.add_argument("--port", type=int, default=None)
    ps.add_argument("--demo-insecure", action="store_true",
                    help="disable SAE header checks (demo mode)")
    ps.set_defaults(func=cmd_kms_serve)

    p = sub.add_parser("qvpn", help="encrypted tunnel endpoint")
    p.add_argument("--role", choices=["initiator", "responder"], required=True)
    p.add_argument("--peer", required=True, help="host:port of the peer endpoint")
    p.add_argument("--kms", required=True, help="local KME base URL")
    p.add_argument("--sae", required=True, help="own SAE id")
    p.add_argument("--peer-sae", required=True, help="peer SAE id")
    p.add_argument("--refresh", type=float, default=10.0)
    p.add_argument("--send", default=None, help="file to transfer")
    p.add_argument("--recv", default=None, help="directory to receive into")
    p.add_argument("--timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_qvpn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
