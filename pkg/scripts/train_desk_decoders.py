"""Pre-train, whiten and bundle the desk decoders (one per message length).

    python scripts/train_desk_decoders.py --lengths 4 8 16 --epochs 40
    python scripts/train_desk_decoders.py --rewhiten     # refit whitening only

``--adapt-epochs N`` adds a decoder-only pass on LL views of encoded 64x64
covers before whitening (off by default).

Crops are 16x16, the size of the LL subband of a 64x64 render at level 2.
"""

import argparse
import json
import os
import time

import numpy as np

from waterf.codec import (
    DecoderTrainConfig,
    adapt_decoder,
    evaluate_codec,
    fit_whitening,
    load_codec,
    save_codec,
    train_decoder,
)
from waterf.corpus import HELDOUT_SOURCES, random_crops
from waterf.desk import calibration_inputs, scene_renders
from waterf.wavelet import TransformSpec, decoder_view

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "waterf", "data")


def _ll_view(x):
    return decoder_view(x.permute(0, 2, 3, 1), TransformSpec()).permute(0, 3, 1, 2)


def adaptation_covers(seed, n=2000):
    return np.concatenate([scene_renders(n // 2, seed), random_crops(n - n // 2, 64, seed=seed)]).astype(np.float32)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--corpus-size", type=int, default=4000)
    ap.add_argument("--image-size", type=int, default=16)
    ap.add_argument("--calibration-size", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=DATA_DIR)
    ap.add_argument("--rewhiten", action="store_true", help="refit whitening of the bundled raw decoders")
    ap.add_argument("--adapt-epochs", type=int, default=0, help="decoder adaptation epochs on LL inputs")
    args = ap.parse_args()

    heldout = random_crops(500, args.image_size, seed=args.seed + 1, sources=HELDOUT_SOURCES)
    calib = calibration_inputs(args.calibration_size, seed=args.seed + 2)
    if args.rewhiten:
        for L in args.lengths:
            enc, _ = load_codec(os.path.join(args.out, f"encoder_L{L}.npz"))
            dec, meta = load_codec(os.path.join(args.out, f"decoder_raw_L{L}.npz"))
            white = fit_whitening(dec, calib)
            meta.update(heldout_bit_accuracy_whitened=evaluate_codec(enc, white, heldout, None, seed=1),
                        calibration_size=len(calib))
            save_codec(os.path.join(args.out, f"decoder_L{L}.npz"), white, "decoder", meta)
            print(L, meta["heldout_bit_accuracy_whitened"], flush=True)
        return

    corpus = random_crops(args.corpus_size, args.image_size, seed=args.seed)
    for L in args.lengths:
        cfg = DecoderTrainConfig(msg_len=L, epochs=args.epochs, image_size=args.image_size, seed=args.seed)
        t0 = time.time()
        enc, dec, hist = train_decoder(corpus, cfg, progress=lambda r: print(L, r, flush=True))
        if args.adapt_epochs:
            dec = adapt_decoder(enc, dec, adaptation_covers(args.seed + 3), view=_ll_view, epochs=args.adapt_epochs,
                                seed=args.seed, progress=lambda r: print(L, "adapt", r, flush=True))
        acc_noise = evaluate_codec(enc, dec, heldout, cfg.noise, seed=1)
        acc_clean = evaluate_codec(enc, dec, heldout, None, seed=1)
        white = fit_whitening(dec, calib)
        acc_white = evaluate_codec(enc, white, heldout, None, seed=1)
        meta = {
            "epochs": cfg.epochs,
            "noise": cfg.to_json()["noise"],
            "training_seed": cfg.seed,
            "corpus_size": len(corpus),
            "image_size": cfg.image_size,
            "heldout_bit_accuracy_distorted": acc_noise,
            "heldout_bit_accuracy_clean": acc_clean,
            "heldout_bit_accuracy_whitened": acc_white,
            "calibration_size": len(calib),
            "adapt_epochs": args.adapt_epochs,
            "history": hist,
            "train_seconds": time.time() - t0,
        }
        save_codec(os.path.join(args.out, f"encoder_L{L}.npz"), enc, "encoder", meta)
        save_codec(os.path.join(args.out, f"decoder_L{L}.npz"), white, "decoder", meta)
        save_codec(os.path.join(args.out, f"decoder_raw_L{L}.npz"), dec, "decoder", meta)
        print(json.dumps({k: v for k, v in meta.items() if k != "history"}), flush=True)


if __name__ == "__main__":
    main()
