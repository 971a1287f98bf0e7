from django.apps import AppConfig


class NumcodecConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "numcodec"
