from .panroad import main
