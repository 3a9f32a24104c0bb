import json
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.data_model import save_dataset, save_grid  # noqa: E402
from app.evaluate import generate_synthetic, synthetic_grid  # noqa: E402


def main() -> None:
    os.makedirs("data", exist_ok=True)
    dataset, truth = generate_synthetic(n_locations=13, n_times=11, seed=7)
    save_dataset(dataset, "data/fading.csv")
    save_grid(synthetic_grid(dataset, (60, 60)), "data/grid.csv")
    Path("data/truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n", encoding="utf-8")

    print(f"Wrote data/fading.csv ({dataset.n_locations} locations x {dataset.n_times} time points)")
    print("Wrote data/grid.csv (60x60 pixels plus the measured spots)")
    print(f"Wrote data/truth.json (prior draws needed: {truth.attempts})")


if __name__ == "__main__":
    main()
