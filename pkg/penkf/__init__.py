from penkf.logger import configure_logging

configure_logging()

__version__ = "0.1.0"
__author__ = "penkf developers"
