import logging
import os
from pathlib import Path

from flask import Flask

from .api import create_api_blueprint
from .config import load_cluster_config, load_profile, load_provider_config
from .service import ClusterService
from .store import DerivationStore


CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


def create_app(*, start_scheduler: bool = True) -> Flask:
    app = Flask(__name__)

    log_level = str(os.getenv("VC_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, log_level, logging.INFO))

    config_path = Path(os.getenv("VC_CONFIG", str(CONFIG_DIR / "cluster.yml")))
    profile_path = Path(os.getenv("VC_PROFILE", str(CONFIG_DIR / "profiles" / "jetstream-like.yml")))
    provider_path = os.getenv("VC_PROVIDER_CONFIG")
    db_path = str(os.getenv("VC_STORE_DB", "/data/vcluster_store.db"))

    config = load_cluster_config(config_path)
    profile = load_profile(profile_path)
    provider_config, retry = load_provider_config(Path(provider_path) if provider_path else None)

    service = ClusterService(config=config, profile=profile, provider_config=provider_config, retry=retry)
    if start_scheduler:
        service.start()

    store = DerivationStore(db_path)

    app.register_blueprint(create_api_blueprint(service=service, store=store), url_prefix="/api")
    app.extensions["vcluster_service"] = service
    logging.getLogger("vcluster").info(
        "[VCLUSTER]: serving cluster '%s' on profile '%s' (max_nodes=%d)",
        config.name,
        profile.name,
        config.max_nodes,
    )

    return app


def main() -> None:
    app = create_app()
    api_port = int(str(os.getenv("VC_API_PORT", "9200")))
    app.run(host="0.0.0.0", port=api_port)


if __name__ == "__main__":
    main()
