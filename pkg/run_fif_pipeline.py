#!/usr/bin/env python3
"""
FIF Pipeline Runner - Programmatic Execution
Runs one fif subcommand, e.g. `python run_fif_pipeline.py train --config configs/sinusoid.ini`
"""

import sys
from pathlib import Path

# Add project to path
sys.path.insert(0, str(Path(__file__).parent))

from fif_flow.pipeline.cli import main as cli_main


def main():
    """Main entry point"""
    argv = sys.argv[1:] or ["--help"]
    print("=" * 80)
    print(f"Starting FIF: {' '.join(argv)}")
    print("=" * 80)
    try:
        code = cli_main(argv)
    except Exception as e:
        print(f"\n✗ Pipeline failed: {str(e)}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        sys.exit(1)

    print("\n" + "=" * 80)
    print("Pipeline Completed Successfully" if code == 0 else f"Pipeline Failed (exit code {code})")
    print("=" * 80)
    sys.exit(code)


if __name__ == "__main__":
    main()
