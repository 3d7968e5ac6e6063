from rewritehub.errors import *
from rewritehub.models import *
from rewritehub.llm import *
from rewritehub.prompts import *
from rewritehub.embedding import *
from rewritehub.repository import *
from rewritehub.database import *
from rewritehub.seeding import *
from rewritehub.corrector import *
from rewritehub.evaluator import *
from rewritehub.report import *
from rewritehub.orchestrator import *
from rewritehub.utils import setup_logger

__version__ = '0.1.0'

# Setup logging for the module
setup_logger(__name__)
