"""Print analytic parameter counts for the variant, depth-split and ViT-size sweeps."""

import argparse

from csmae.backbone import VARIANTS, VIT_VARIANTS, ModelConfig, count_parameters


def millions(cfg: ModelConfig) -> str:
    return f"{count_parameters(cfg)['total'] / 1e6:8.2f}"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--patch-size", type=int, default=15)
    args = parser.parse_args()
    base = ModelConfig(patch_size=args.patch_size)

    print("# variants (ViT-B12, cross depth 2)")
    for v in VARIANTS:
        print(f"{v:<10}{millions(base.with_updates(variant=v))} M")

    print("\n# SECD depth split: sensor-specific + cross-sensor")
    for cross in (2, 4, 6, 8, 10):
        cfg = base.with_updates(variant="SECD", cross_depth=cross)
        print(f"{cfg.sensor_depth:>2} + {cross:<5}{millions(cfg)} M")

    print("\n# CECD backbone size")
    for name in VIT_VARIANTS:
        print(f"{name:<10}{millions(base.with_updates(variant='CECD', vit_variant=name))} M")


if __name__ == "__main__":
    main()
