"""
FIF Flow (Free-form Injective Flows)

Joint manifold and maximum-likelihood training of encoder/decoder pairs, with the
analytic oracles used to verify every estimator at desk scale.
"""

from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file in the package directory
env_path = Path(__file__).parent / ".env"
if env_path.exists():
    load_dotenv(dotenv_path=env_path)

__version__ = "0.1.0"
