from .engine import *
from .mfg import *
from .general import *
