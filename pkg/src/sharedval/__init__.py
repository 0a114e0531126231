"""Shared address validation across hostnames for QUIC-style handshakes."""
from .cache import TokenCache, group_for_connection
from .groups import Certificate, GroupId, TrustPartition, accepts, build_trust_partition, group_of_certificate
from .netsim import SimConfig, ServerSpec, ConnectionStep, run_scenario, run_spoof_attack
from .pageload import DomainTree, SiteNode, evaluate_dataset, gen_synthetic, load_dataset, simulate_site
from .tokens import GroupSecret, ReplayStore, decode_token, issue_token, validate_token

__version__ = "0.1.0"
