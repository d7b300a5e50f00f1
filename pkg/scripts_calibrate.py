"""Pilot training run to calibrate the acceptance recipe (not shipped)."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from pcjoint.conditioning import QualityMap
from pcjoint.data import synth_dataset
from pcjoint.metrics import attr_mse, d1_mse
from pcjoint.model import CodecModel, ModelConfig, decode, encode
from pcjoint.training import TrainConfig, train


def behavioral_probe(model, samples, qa_levels=(0.1, 0.5, 0.9), qg=0.5):
    rows = []
    for s in samples:
        cloud = s.cloud
        per = []
        for qa in qa_levels:
            qmap = QualityMap.uniform(cloud.coords, qg, qa)
            stream = encode(model, cloud, qmap)
            data = stream.to_bytes()
            recon = decode(model, data)
            per.append({
                "qa": qa,
                "bpp": 8 * len(data) / len(cloud),
                "attr_mse": attr_mse(recon, cloud),
                "geo_mse": d1_mse(recon, cloud),
            })
        rows.append(per)
    return rows


def summarize(rows, key):
    levels = [r["qa"] for r in rows[0]]
    means = [np.mean([per[i][key] for per in rows]) for i in range(len(levels))]
    return levels, means


def main():
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
    n_samples = int(sys.argv[2]) if len(sys.argv) > 2 else 120
    seed = 0
    tc = TrainConfig(
        epochs=epochs, batch_size=4, dataset_size=n_samples, edge=32, seed=seed,
        out_path="/tmp/pilot.ckpt", checkpoint_every=5,
    )
    t0 = time.time()
    model, rows = train(tc, log=lambda m: print(m, flush=True))
    print(f"training took {time.time()-t0:.0f}s")

    held_out = synth_dataset(10, 32, seed=777)
    probe = behavioral_probe(model, held_out)
    for key in ("bpp", "attr_mse", "geo_mse"):
        levels, means = summarize(probe, key)
        print(f"qa sweep {key}: " + "  ".join(f"{q}:{m:.5g}" for q, m in zip(levels, means)), flush=True)

    # geometry sweep
    probe_g = []
    for s in held_out:
        per = []
        for qg in (0.1, 0.5, 0.9):
            qmap = QualityMap.uniform(s.cloud.coords, qg, 0.5)
            stream = encode(model, s.cloud, qmap)
            data = stream.to_bytes()
            recon = decode(model, data)
            per.append({"qa": qg, "bpp": 8 * len(data) / len(s.cloud),
                        "attr_mse": attr_mse(recon, s.cloud),
                        "geo_mse": d1_mse(recon, s.cloud)})
        probe_g.append(per)
    for key in ("bpp", "attr_mse", "geo_mse"):
        levels, means = summarize(probe_g, key)
        print(f"qg sweep {key}: " + "  ".join(f"{q}:{m:.5g}" for q, m in zip(levels, means)), flush=True)

    # surrogate correlation
    from scipy import stats
    qhats, qas = [], []
    rng = np.random.default_rng(5)
    for s in held_out:
        qa = float(rng.uniform(0.05, 0.95))
        qmap = QualityMap.uniform(s.cloud.coords, 0.5, qa)
        stream = encode(model, s.cloud, qmap)
        # re-run the decode-side surrogate
        from pcjoint.model import encode_analysis, hyper_path, infer_surrogate_quality
        latent, _ = encode_analysis(model, s.cloud, qmap)
        hyper = hyper_path(model, latent, mode="round", resolution=s.cloud.resolution)
        qhat = infer_surrogate_quality(model, latent.coords, hyper["trunk"],
                                       np.round(latent.feats))
        qhats.append(float(qhat.qa.mean()))
        qas.append(qa)
    r = stats.pearsonr(qas, qhats)[0]
    print(f"surrogate qa correlation over 10 clouds: {r:.3f}", flush=True)


if __name__ == "__main__":
    main()
