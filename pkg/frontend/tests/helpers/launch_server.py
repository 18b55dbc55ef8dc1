"""Start a disposable annotation service for UI integration tests.

Seeds 15 labelable images plus 5 A/B pairs, prints one JSON line with the
chosen port and working directory, then serves until killed.
"""

import json
import socket
import sys
import tempfile
from pathlib import Path

import torch

from advsynth.annotation import AnnotationService, make_ab_pairs
from advsynth.data import ImageBatch, quantize8, save_image_batch
from advsynth.server import create_app


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="annot-ui-"))
    images_dir = root / "images"
    g = torch.Generator().manual_seed(0)
    n_label, n_real = 15, 15
    batch = ImageBatch(quantize8(torch.rand(n_label + n_real, 1, 8, 8, generator=g)))
    save_image_batch(batch, images_dir, prefix="img")

    service = AnnotationService(root / "events.jsonl", quorum=5, page_size=10)
    label_ids = [f"img-{i:06d}" for i in range(n_label)]
    real_ids = [f"img-{i:06d}" for i in range(n_label, n_label + n_real)]
    service.enqueue_batch([{"id": i, "hash": i, "k": 2} for i in label_ids], mode="label")

    pairs = make_ab_pairs(label_ids[:5], real_ids, seed=1)
    service.enqueue_batch(
        [
            {"id": p["pair_id"], "hash": p["pair_id"], "k": 2,
             "meta": {"left": p["left"], "right": p["right"]}}
            for p in pairs
        ],
        mode="ab",
    )
    (root / "pairs.json").write_text(json.dumps(pairs))

    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    print(json.dumps({"port": port, "root": str(root)}), flush=True)

    import uvicorn

    uvicorn.run(create_app(service, image_dir=images_dir), host="127.0.0.1", port=port,
                log_level="error")


if __name__ == "__main__":
    main()
