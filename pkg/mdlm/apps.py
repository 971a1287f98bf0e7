from django.apps import AppConfig


class MdlmConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "mdlm"
